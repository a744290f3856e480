#include "tablefree/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "tablefree/random.hpp"

namespace tablefree::lm {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kInitTruncation = 2.0;
constexpr std::string_view kCheckpointMagic = "tablefree-checkpoint v1";

void invalid(const std::string& what) { throw Error(Errc::InvalidConfig, what); }

}  // namespace

std::string_view to_string(InputKind kind) {
  switch (kind) {
    case InputKind::Learned: return "learned";
    case InputKind::FixedCode: return "fixed";
    case InputKind::AffineRecoded: return "affine";
  }
  return "unknown";
}

InputKind parse_input_kind(std::string_view text) {
  if (text == "learned") return InputKind::Learned;
  if (text == "fixed" || text == "fixed_code") return InputKind::FixedCode;
  if (text == "affine" || text == "affine_recoded") return InputKind::AffineRecoded;
  throw Error(Errc::InvalidConfig, "unknown input kind '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  if (vocab_size < 1) invalid("vocab_size must be positive");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || context_len < 1 || mlp_ratio < 1) {
    invalid("model extents must be positive");
  }
  if (d_model % n_heads != 0) invalid("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) invalid("head dimension must be even for rotary encoding");
  if (input_kind != InputKind::Learned && d_model % codes::minimal_width(vocab_size) != 0) {
    invalid("d_model must be divisible by the code width K=" +
            std::to_string(codes::minimal_width(vocab_size)));
  }
  if (!(rope_base > 0.0) || !(norm_eps > 0.0)) invalid("rope_base and norm_eps must be positive");
}

ModelConfig read_model_config(const KeyValues& kv) {
  ModelConfig c;
  c.vocab_size = static_cast<int>(kv.get_int_or("model.vocab_size", c.vocab_size));
  c.d_model = static_cast<int>(kv.get_int_or("model.d_model", c.d_model));
  c.n_layers = static_cast<int>(kv.get_int_or("model.n_layers", c.n_layers));
  c.n_heads = static_cast<int>(kv.get_int_or("model.n_heads", c.n_heads));
  c.context_len = static_cast<int>(kv.get_int_or("model.context_len", c.context_len));
  c.mlp_ratio = static_cast<int>(kv.get_int_or("model.mlp_ratio", c.mlp_ratio));
  c.rope_base = kv.get_double_or("model.rope_base", c.rope_base);
  c.norm_eps = kv.get_double_or("model.norm_eps", c.norm_eps);
  if (kv.has("model.input_kind")) c.input_kind = parse_input_kind(kv.get("model.input_kind"));
  return c;
}

void write_model_config(KeyValues& kv, const ModelConfig& c) {
  kv.set("model.vocab_size", std::int64_t{c.vocab_size});
  kv.set("model.d_model", std::int64_t{c.d_model});
  kv.set("model.n_layers", std::int64_t{c.n_layers});
  kv.set("model.n_heads", std::int64_t{c.n_heads});
  kv.set("model.context_len", std::int64_t{c.context_len});
  kv.set("model.mlp_ratio", std::int64_t{c.mlp_ratio});
  kv.set("model.rope_base", c.rope_base);
  kv.set("model.norm_eps", c.norm_eps);
  kv.set("model.input_kind", std::string(to_string(c.input_kind)));
}

std::vector<ParameterInfo> parameter_layout(const ModelConfig& config) {
  config.validate();
  const Index d = config.d_model;
  const Index hidden = d * config.mlp_ratio;
  std::vector<ParameterInfo> layout;
  auto matrix = [&](std::string name, Index r, Index c) {
    layout.push_back({std::move(name), r, c, false, true});
  };
  auto vector = [&](std::string name, Index c) {
    layout.push_back({std::move(name), 1, c, false, false});
  };
  if (config.input_kind == InputKind::Learned) {
    layout.push_back({"input.table", config.vocab_size, d, true, true});
  }
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    vector(p + "ln1.gain", d);
    vector(p + "ln1.shift", d);
    matrix(p + "attn.wq", d, d);
    vector(p + "attn.bq", d);
    matrix(p + "attn.wk", d, d);
    vector(p + "attn.bk", d);
    matrix(p + "attn.wv", d, d);
    vector(p + "attn.bv", d);
    matrix(p + "attn.wo", d, d);
    vector(p + "attn.bo", d);
    vector(p + "ln2.gain", d);
    vector(p + "ln2.shift", d);
    matrix(p + "mlp.w1", d, hidden);
    vector(p + "mlp.b1", hidden);
    matrix(p + "mlp.w2", hidden, d);
    vector(p + "mlp.b2", d);
  }
  vector("final.gain", d);
  vector("final.shift", d);
  matrix("output.weight", d, config.vocab_size);
  return layout;
}

std::int64_t trainable_parameter_count(const ModelConfig& config) {
  std::int64_t n = 0;
  for (const auto& p : parameter_layout(config)) n += p.rows * p.cols;
  return n;
}

const Matrix<float>& Parameters::at(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.info.name == name) return a.value;
  }
  throw Error(Errc::InvalidConfig, "no parameter named " + std::string(name));
}

Matrix<float>& Parameters::at(std::string_view name) {
  return const_cast<Matrix<float>&>(std::as_const(*this).at(name));
}

bool Parameters::contains(std::string_view name) const {
  return std::any_of(arrays.begin(), arrays.end(),
                     [&](const NamedArray& a) { return a.info.name == name; });
}

std::int64_t Parameters::count() const {
  std::int64_t n = 0;
  for (const auto& a : arrays) n += a.value.size();
  return n;
}

Parameters init_model(const ModelConfig& config, std::uint64_t seed) {
  Parameters params;
  Rng rng(seed);
  for (auto& info : parameter_layout(config)) {
    Matrix<float> value(info.rows, info.cols);
    if (info.matrix) {
      for (Index i = 0; i < value.size(); ++i) {
        value.data()[i] = static_cast<float>(rng.truncated_normal(kInitStd, kInitTruncation));
      }
    } else if (info.name.ends_with(".gain")) {
      value.setOnes();
    } else {
      value.setZero();
    }
    params.arrays.push_back({std::move(info), std::move(value)});
  }
  return params;
}

InputInterface::InputInterface(InputKind kind, int vocab_size, int width)
    : kind_(kind), vocab_size_(vocab_size), width_(width) {}

InputInterface InputInterface::learned(int vocab_size, int d_model) {
  return InputInterface(InputKind::Learned, vocab_size, d_model);
}

InputInterface InputInterface::fixed_code(codes::CodeSpec spec) {
  if (spec.recoder()) invalid("fixed-code interface takes a spec without a recoder");
  InputInterface in(InputKind::FixedCode, static_cast<int>(spec.vocab_size()), spec.lift_width());
  if (!codes::verify_injectivity(spec).ok) invalid("token code is not injective");
  in.spec_ = std::move(spec);
  return in;
}

InputInterface InputInterface::affine_recoded(codes::CodeSpec spec) {
  if (!spec.recoder()) invalid("affine-recoded interface requires a recoder");
  InputInterface in(InputKind::AffineRecoded, static_cast<int>(spec.vocab_size()),
                    spec.lift_width());
  if (!codes::verify_injectivity(spec).ok) invalid("token code is not injective");
  in.spec_ = std::move(spec);
  return in;
}

InputInterface InputInterface::frozen_lookup(codes::FrozenTable table) {
  InputInterface in(InputKind::FixedCode, static_cast<int>(table.vocab_size()), table.width());
  in.table_ = std::move(table);
  return in;
}

InputInterface InputInterface::for_config(const ModelConfig& config, std::uint64_t recoder_seed) {
  config.validate();
  switch (config.input_kind) {
    case InputKind::Learned:
      return learned(config.vocab_size, config.d_model);
    case InputKind::FixedCode:
      return fixed_code(codes::CodeSpec(config.vocab_size, config.d_model));
    case InputKind::AffineRecoded: {
      const int k = codes::minimal_width(config.vocab_size);
      return affine_recoded(codes::CodeSpec(config.vocab_size, config.d_model,
                                            codes::sample_recoder(k, recoder_seed)));
    }
  }
  invalid("unknown input kind");
  return learned(0, 0);
}

std::int64_t InputInterface::trainable_parameter_count() const {
  return kind_ == InputKind::Learned ? std::int64_t{vocab_size_} * width_ : 0;
}

void InputInterface::encode(std::span<const data::Token> ids, Matrix<float>& out) const {
  out.resize(static_cast<Index>(ids.size()), width_);
  if (table_) {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || ids[r] >= table_->vocab_size()) {
        throw Error(Errc::TokenOutOfRange, "token " + std::to_string(ids[r]));
      }
      out.row(static_cast<Index>(r)) = table_->rows.row(ids[r]);
    }
    return;
  }
  if (!spec_) throw Error(Errc::InvalidConfig, "learned inputs come from the parameter table");
  codes::encode_tokens<float, data::Token>(ids, *spec_, out);
}

Graph build_graph(const ModelConfig& config, const Parameters& params,
                  const InputInterface& input, std::span<const data::Token> tokens, int batch,
                  int time, bool track_gradients) {
  using namespace kernel;
  if (batch < 1 || time < 1 || static_cast<std::size_t>(batch) * time != tokens.size()) {
    throw Error(Errc::ShapeMismatch, "tokens do not form a [batch, time] block");
  }
  if (time > config.context_len) {
    throw Error(Errc::ShapeMismatch, "sequence length " + std::to_string(time) +
                                         " exceeds context " + std::to_string(config.context_len));
  }
  if (input.width() != config.d_model || input.vocab_size() != config.vocab_size) {
    throw Error(Errc::ShapeMismatch, "input interface does not match model config");
  }
  if ((input.kind() == InputKind::Learned) != params.contains("input.table")) {
    throw Error(Errc::InvalidConfig, "parameters and input interface disagree on the input table");
  }

  Graph g;
  auto& tape = g.tape;
  for (const auto& a : params.arrays) {
    g.params.push_back(track_gradients ? tape.parameter(a.value) : tape.constant(a.value));
  }
  std::size_t next = 0;
  auto take = [&](std::string_view name) {
    const auto i = next++;
    if (params.arrays[i].info.name != name) {
      throw Error(Errc::InvalidConfig, "unexpected parameter order at " + std::string(name));
    }
    return g.params[i];
  };

  if (input.kind() == InputKind::Learned) {
    g.inputs = embedding(tape, take("input.table"), tokens);
  } else {
    Matrix<float> x;
    input.encode(tokens, x);
    g.inputs = tape.constant(std::move(x));
  }

  const SequenceShape shape{batch, time, config.n_heads};
  const auto eps = static_cast<float>(config.norm_eps);
  Var h = g.inputs;
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const Var ln1_gain = take(p + "ln1.gain");
    const Var ln1_shift = take(p + "ln1.shift");
    const Var wq = take(p + "attn.wq");
    const Var bq = take(p + "attn.bq");
    const Var wk = take(p + "attn.wk");
    const Var bk = take(p + "attn.bk");
    const Var wv = take(p + "attn.wv");
    const Var bv = take(p + "attn.bv");
    const Var wo = take(p + "attn.wo");
    const Var bo = take(p + "attn.bo");
    const Var ln2_gain = take(p + "ln2.gain");
    const Var ln2_shift = take(p + "ln2.shift");
    const Var w1 = take(p + "mlp.w1");
    const Var b1 = take(p + "mlp.b1");
    const Var w2 = take(p + "mlp.w2");
    const Var b2 = take(p + "mlp.b2");

    const Var a = layer_norm(tape, h, ln1_gain, ln1_shift, eps);
    const Var q = rope_rotate(tape, linear(tape, a, wq, bq), shape, config.rope_base);
    const Var k = rope_rotate(tape, linear(tape, a, wk, bk), shape, config.rope_base);
    const Var v = linear(tape, a, wv, bv);
    const Var att = causal_attention(tape, q, k, v, shape);
    h = add(tape, h, linear(tape, att, wo, bo));

    const Var m = layer_norm(tape, h, ln2_gain, ln2_shift, eps);
    const Var hidden = gelu(tape, linear(tape, m, w1, b1));
    h = add(tape, h, linear(tape, hidden, w2, b2));
  }
  const Var final_gain = take("final.gain");
  const Var final_shift = take("final.shift");
  const Var out = take("output.weight");
  g.logits = linear(tape, layer_norm(tape, h, final_gain, final_shift, eps), out);
  return g;
}

Matrix<float> forward(const ModelConfig& config, const Parameters& params,
                      const InputInterface& input, std::span<const data::Token> tokens, int batch,
                      int time) {
  auto g = build_graph(config, params, input, tokens, batch, time, false);
  return g.tape.value(g.logits);
}

int default_warmup_steps(int total_steps) {
  return std::max(10, static_cast<int>(static_cast<std::int64_t>(total_steps) * 150 / 5212));
}

double learning_rate(const OptimizerConfig& opt, int step) {
  const int warmup = std::max(1, opt.warmup_steps);
  if (step < warmup) return opt.peak_lr * static_cast<double>(step + 1) / warmup;
  const int last = opt.total_steps - 1;
  if (step >= last || last <= warmup) return opt.min_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(last - warmup);
  return opt.min_lr +
         (opt.peak_lr - opt.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainState make_train_state(const ModelConfig& config, const OptimizerConfig& opt,
                            std::uint64_t seed) {
  if (opt.total_steps < 1) invalid("total_steps must be positive");
  TrainState state;
  state.config = config;
  state.opt = opt;
  state.params = init_model(config, seed);
  state.seed = seed;
  for (const auto& a : state.params.arrays) {
    state.first_moment.push_back(Matrix<float>::Zero(a.value.rows(), a.value.cols()));
    state.second_moment.push_back(Matrix<float>::Zero(a.value.rows(), a.value.cols()));
  }
  return state;
}

StepMetrics train_step(TrainState& state, const InputInterface& input, const data::Batch& batch) {
  auto g = build_graph(state.config, state.params, input, batch.tokens, batch.batch, batch.time);
  const auto loss_var =
      kernel::softmax_cross_entropy(g.tape, g.logits, std::span<const data::Token>(batch.targets));
  StepMetrics metrics;
  metrics.loss = static_cast<double>(g.tape.value(loss_var)(0, 0));
  if (!std::isfinite(metrics.loss)) {
    throw Error(Errc::NonFiniteLoss, "loss is " + std::to_string(metrics.loss) + " at step " +
                                         std::to_string(state.step));
  }
  g.tape.backward(loss_var);

  double sumsq = 0.0;
  for (auto v : g.params) {
    if (g.tape.has_grad(v)) sumsq += static_cast<double>(g.tape.grad(v).squaredNorm());
  }
  metrics.grad_norm = std::sqrt(sumsq);
  const double clip = state.opt.grad_clip;
  const double scale = (clip > 0.0 && metrics.grad_norm > clip) ? clip / metrics.grad_norm : 1.0;
  metrics.clipped_grad_norm = metrics.grad_norm * scale;

  const auto& opt = state.opt;
  metrics.lr = learning_rate(opt, state.step);
  const int t = state.step + 1;
  const auto lr = static_cast<float>(metrics.lr);
  const auto b1 = static_cast<float>(opt.beta1);
  const auto b2 = static_cast<float>(opt.beta2);
  const auto eps = static_cast<float>(opt.eps);
  const auto bias1 = static_cast<float>(1.0 - std::pow(opt.beta1, t));
  const auto bias2 = static_cast<float>(1.0 - std::pow(opt.beta2, t));
  const auto decay = static_cast<float>(1.0 - metrics.lr * opt.weight_decay);
  const auto fscale = static_cast<float>(scale);

  for (std::size_t i = 0; i < state.params.arrays.size(); ++i) {
    auto& param = state.params.arrays[i];
    if (!g.tape.has_grad(g.params[i])) continue;
    const auto grad = (g.tape.grad(g.params[i]).array() * fscale).eval();
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    m = b1 * m + (1.0f - b1) * grad;
    v = b2 * v + (1.0f - b2) * grad.square();
    const bool decays = param.info.matrix && (!param.info.is_input_table || opt.decay_input_table);
    auto p = param.value.array();
    if (decays) p *= decay;
    p -= lr * (m / bias1) / ((v / bias2).sqrt() + eps);
  }
  ++state.step;
  return metrics;
}

EvalMetrics evaluate(const ModelConfig& config, const Parameters& params,
                     const InputInterface& input, std::span<const data::Batch> batches) {
  EvalMetrics out;
  double total = 0.0;
  for (const auto& b : batches) {
    auto g = build_graph(config, params, input, b.tokens, b.batch, b.time, false);
    const auto loss =
        kernel::softmax_cross_entropy(g.tape, g.logits, std::span<const data::Token>(b.targets));
    const auto n = static_cast<std::int64_t>(b.targets.size());
    total += static_cast<double>(g.tape.value(loss)(0, 0)) * static_cast<double>(n);
    out.tokens_evaluated += n;
  }
  if (out.tokens_evaluated == 0) throw Error(Errc::EmptyStream, "no validation tokens");
  out.val_loss = total / static_cast<double>(out.tokens_evaluated);
  out.val_ppl = std::exp(out.val_loss);
  return out;
}

std::vector<data::Token> sample_text(const ModelConfig& config, const Parameters& params,
                                     const InputInterface& input,
                                     std::span<const data::Token> prompt, int n_tokens,
                                     double temperature, std::uint64_t seed) {
  if (temperature < 0.0) throw Error(Errc::InvalidArgs, "temperature must be non-negative");
  std::vector<data::Token> out(prompt.begin(), prompt.end());
  if (n_tokens <= 0) return out;
  if (out.empty()) out.push_back(data::kDocumentSeparator);
  Rng rng(seed);
  for (int i = 0; i < n_tokens; ++i) {
    const auto len = std::min<std::size_t>(out.size(), static_cast<std::size_t>(config.context_len));
    const std::span<const data::Token> window(out.data() + out.size() - len, len);
    const auto logits = forward(config, params, input, window, 1, static_cast<int>(len));
    const auto last = logits.row(logits.rows() - 1);
    Index next = 0;
    if (temperature == 0.0) {
      last.maxCoeff(&next);
    } else {
      const double mx = static_cast<double>(last.maxCoeff());
      std::vector<double> weights(static_cast<std::size_t>(last.size()));
      double sum = 0.0;
      for (Index j = 0; j < last.size(); ++j) {
        weights[j] = std::exp((static_cast<double>(last[j]) - mx) / temperature);
        sum += weights[j];
      }
      double u = rng.uniform() * sum;
      next = last.size() - 1;
      for (Index j = 0; j < last.size(); ++j) {
        u -= weights[j];
        if (u < 0.0) {
          next = j;
          break;
        }
      }
    }
    out.push_back(static_cast<data::Token>(next));
  }
  return out;
}

InputInterface Checkpoint::input_interface() const {
  switch (config.input_kind) {
    case InputKind::Learned:
      return InputInterface::learned(config.vocab_size, config.d_model);
    case InputKind::FixedCode:
      if (!code_spec) invalid("checkpoint lacks its code spec");
      return InputInterface::fixed_code(*code_spec);
    case InputKind::AffineRecoded:
      if (!code_spec) invalid("checkpoint lacks its code spec");
      return InputInterface::affine_recoded(*code_spec);
  }
  invalid("unknown input kind");
  return InputInterface::learned(0, 0);
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  KeyValues header;
  write_model_config(header, ckpt.config);
  header.set("step", std::int64_t{ckpt.step});
  header.set("seed", std::to_string(ckpt.seed));
  if (ckpt.code_spec) {
    std::stringstream ss;
    codes::write_code_spec(ss, *ckpt.code_spec);
    const auto code = KeyValues::parse(ss);
    for (const auto& [key, value] : code.entries()) header.set("code." + key, value);
  }
  out << kCheckpointMagic << '\n';
  header.write(out);
  out << "---\n";
  for (const auto& a : ckpt.params.arrays) {
    const auto name_len = static_cast<std::uint32_t>(a.info.name.size());
    const auto rows = static_cast<std::uint64_t>(a.value.rows());
    const auto cols = static_cast<std::uint64_t>(a.value.cols());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(a.info.name.data(), name_len);
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(a.value.data()),
              static_cast<std::streamsize>(a.value.size() * sizeof(float)));
  }
  if (!out) throw Error(Errc::IoFailure, "failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw Error(Errc::ParseError, "not a tablefree checkpoint");
  }
  std::stringstream header_text;
  std::stringstream code_text;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == "---") {
      terminated = true;
      break;
    }
    header_text << line << '\n';
    if (line.rfind("code.", 0) == 0) code_text << line.substr(5) << '\n';
  }
  if (!terminated) throw Error(Errc::ParseError, "checkpoint header not terminated");
  const auto header = KeyValues::parse(header_text);

  Checkpoint ckpt;
  ckpt.config = read_model_config(header);
  ckpt.config.validate();
  ckpt.step = static_cast<int>(header.get_int("step"));
  ckpt.seed = std::stoull(header.get("seed"));
  if (!code_text.str().empty()) ckpt.code_spec = codes::read_code_spec(code_text);

  for (auto& info : parameter_layout(ckpt.config)) {
    std::uint32_t name_len = 0;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
    in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
    if (!in || name != info.name || rows != static_cast<std::uint64_t>(info.rows) ||
        cols != static_cast<std::uint64_t>(info.cols)) {
      throw Error(Errc::ParseError, "checkpoint array does not match layout at " + info.name);
    }
    Matrix<float> value(info.rows, info.cols);
    in.read(reinterpret_cast<char*>(value.data()),
            static_cast<std::streamsize>(value.size() * sizeof(float)));
    if (!in) throw Error(Errc::ParseError, "checkpoint truncated in " + info.name);
    if (!value.allFinite()) throw Error(Errc::ParseError, "non-finite values in " + info.name);
    ckpt.params.arrays.push_back({std::move(info), std::move(value)});
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path);
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace tablefree::lm

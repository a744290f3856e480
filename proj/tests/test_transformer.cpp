#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "tablefree/random.hpp"
#include "tablefree/transformer.hpp"

using namespace tablefree;
using namespace tablefree::lm;

namespace {

ModelConfig small_config(InputKind kind) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.context_len = 12;
  c.input_kind = kind;
  return c;
}

std::vector<data::Token> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<data::Token> out(n);
  for (auto& t : out) t = static_cast<data::Token>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

data::Batch random_batch(int batch, int time, int vocab, std::uint64_t seed) {
  data::Batch b;
  b.batch = batch;
  b.time = time;
  b.tokens = random_tokens(static_cast<std::size_t>(batch * time), vocab, seed);
  b.targets = random_tokens(static_cast<std::size_t>(batch * time), vocab, seed + 1);
  return b;
}

bool bit_identical(const Matrix<float>& a, const Matrix<float>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

bool same_parameters(const Parameters& a, const Parameters& b) {
  if (a.arrays.size() != b.arrays.size()) return false;
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    if (a.arrays[i].info.name != b.arrays[i].info.name) return false;
    if (!bit_identical(a.arrays[i].value, b.arrays[i].value)) return false;
  }
  return true;
}

// Loss and per-array gradients for one batch.
struct LossAndGrads {
  double loss = 0.0;
  std::vector<Matrix<float>> grads;
  Matrix<float> logits;
};

LossAndGrads loss_and_grads(const ModelConfig& c, const Parameters& p, const InputInterface& in,
                            const data::Batch& b) {
  auto g = build_graph(c, p, in, b.tokens, b.batch, b.time);
  const auto loss =
      kernel::softmax_cross_entropy(g.tape, g.logits, std::span<const data::Token>(b.targets));
  g.tape.backward(loss);
  LossAndGrads out;
  out.loss = g.tape.value(loss)(0, 0);
  out.logits = g.tape.value(g.logits);
  for (auto v : g.params) {
    out.grads.push_back(g.tape.has_grad(v) ? Matrix<float>(g.tape.grad(v)) : Matrix<float>());
  }
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.head_dim() == 16);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = ModelConfig{};
  c.d_model = 36;
  c.n_heads = 4;  // head dim 9 is odd
  CHECK_THROWS_AS(c.validate(), Error);
  c = ModelConfig{};
  c.d_model = 60;
  c.n_heads = 6;  // even heads, but 60 is not a multiple of K = 8
  CHECK_THROWS_AS(c.validate(), Error);
  c.input_kind = InputKind::Learned;
  CHECK_NOTHROW(c.validate());
  CHECK(parse_input_kind("fixed") == InputKind::FixedCode);
  CHECK(parse_input_kind("affine_recoded") == InputKind::AffineRecoded);
  CHECK(to_string(InputKind::Learned) == "learned");
  CHECK_THROWS_AS(parse_input_kind("embedding"), Error);
}

TEST_CASE("initialization is deterministic and follows the scheme") {
  const ModelConfig c;
  const auto a = init_model(c, 7);
  const auto b = init_model(c, 7);
  CHECK(same_parameters(a, b));
  CHECK_FALSE(same_parameters(a, init_model(c, 8)));
  for (const auto& arr : a.arrays) {
    if (arr.info.matrix) {
      CHECK(arr.value.cwiseAbs().maxCoeff() <= 0.04F);
      const double mean = arr.value.mean();
      CHECK(std::abs(mean) < 0.005);
    } else if (arr.info.name.ends_with(".gain")) {
      CHECK(arr.value.isOnes());
    } else {
      CHECK(arr.value.isZero());
    }
  }
}

TEST_CASE("parameter census") {
  ModelConfig learned;
  learned.input_kind = InputKind::Learned;
  ModelConfig fixed;
  fixed.input_kind = InputKind::FixedCode;
  ModelConfig affine;
  affine.input_kind = InputKind::AffineRecoded;
  CHECK(trainable_parameter_count(learned) - trainable_parameter_count(fixed) == 256 * 64);
  CHECK(trainable_parameter_count(fixed) == trainable_parameter_count(affine));
  CHECK(init_model(learned, 1).count() == trainable_parameter_count(learned));

  // The input side of a code variant starts directly with the first block.
  // (mlp.w2 is also [4d, d] = [256, 64] here, on the block side.)
  for (const auto& cfg : {fixed, affine}) {
    const auto layout = parameter_layout(cfg);
    CHECK(layout.front().name == "layer0.ln1.gain");
    for (const auto& info : layout) {
      CHECK_FALSE(info.is_input_table);
      CHECK_FALSE(info.name.starts_with("input."));
    }
  }
  CHECK(parameter_layout(learned).front().name == "input.table");
  CHECK(InputInterface::for_config(learned, 1).trainable_parameter_count() == 16384);
  CHECK(InputInterface::for_config(fixed, 1).trainable_parameter_count() == 0);
  CHECK(InputInterface::for_config(affine, 1).trainable_parameter_count() == 0);

  // Census only: the layout is computed without allocating anything.
  ModelConfig full_scale;
  full_scale.vocab_size = 65536;
  full_scale.d_model = 1024;
  full_scale.n_layers = 32;
  full_scale.n_heads = 32;
  full_scale.context_len = 1024;
  full_scale.input_kind = InputKind::Learned;
  const auto with_table = trainable_parameter_count(full_scale);
  full_scale.input_kind = InputKind::FixedCode;
  CHECK(with_table - trainable_parameter_count(full_scale) == 67108864);
}

TEST_CASE("weight decay applies to weight matrices and the learned table only") {
  ModelConfig c;
  c.input_kind = InputKind::Learned;
  for (const auto& info : parameter_layout(c)) {
    const bool is_vector = info.rows == 1;
    CHECK(info.matrix == !is_vector);
    CHECK(info.is_input_table == (info.name == "input.table"));
  }
}

TEST_CASE("forward shape and causality") {
  for (auto kind : {InputKind::Learned, InputKind::FixedCode, InputKind::AffineRecoded}) {
    CAPTURE(to_string(kind));
    const auto c = small_config(kind);
    const auto p = init_model(c, 3);
    const auto in = InputInterface::for_config(c, 5);
    auto tokens = random_tokens(2 * 10, 16, 9);
    const auto logits = forward(c, p, in, tokens, 2, 10);
    CHECK(logits.rows() == 20);
    CHECK(logits.cols() == 16);

    const int pos = 6;
    tokens[static_cast<std::size_t>(10 + pos)] = (tokens[static_cast<std::size_t>(10 + pos)] + 1) % 16;
    const auto changed = forward(c, p, in, tokens, 2, 10);
    // Batch row 0 is untouched; in row 1 only positions >= pos may move.
    CHECK(bit_identical(logits.topRows(10), changed.topRows(10)));
    CHECK(bit_identical(logits.middleRows(10, pos), changed.middleRows(10, pos)));
    CHECK_FALSE(bit_identical(logits.middleRows(10 + pos, 1), changed.middleRows(10 + pos, 1)));
  }

  const auto c = small_config(InputKind::FixedCode);
  const auto p = init_model(c, 3);
  const auto in = InputInterface::for_config(c, 1);
  CHECK_THROWS_AS(forward(c, p, in, random_tokens(13, 16, 1), 1, 13), Error);
  std::vector<data::Token> bad{1, 2, 16};
  CHECK_THROWS_AS(forward(c, p, in, bad, 1, 3), Error);
}

TEST_CASE("frozen lookup and table-free encoding give bit-identical logits and gradients") {
  for (auto kind : {InputKind::FixedCode, InputKind::AffineRecoded}) {
    CAPTURE(to_string(kind));
    ModelConfig c;
    c.context_len = 32;
    c.input_kind = kind;
    const auto p = init_model(c, 11);
    const auto table_free = InputInterface::for_config(c, 4);
    const auto frozen =
        InputInterface::frozen_lookup(codes::export_frozen_table(*table_free.code_spec()));
    CHECK(frozen.frozen());
    CHECK(frozen.trainable_parameter_count() == 0);
    const auto batch = random_batch(2, 32, 256, 21);
    const auto a = loss_and_grads(c, p, table_free, batch);
    const auto b = loss_and_grads(c, p, frozen, batch);
    CHECK(bit_identical(a.logits, b.logits));
    CHECK(std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss));
    REQUIRE(a.grads.size() == b.grads.size());
    for (std::size_t i = 0; i < a.grads.size(); ++i) CHECK(bit_identical(a.grads[i], b.grads[i]));
  }
}

TEST_CASE("inputs of a code variant have rank K and each head sees two whole tiles") {
  const ModelConfig c;
  const int k = codes::minimal_width(c.vocab_size);
  REQUIRE(c.head_dim() == 2 * k);
  for (auto kind : {InputKind::FixedCode, InputKind::AffineRecoded}) {
    ModelConfig cfg = c;
    cfg.input_kind = kind;
    const auto in = InputInterface::for_config(cfg, 3);
    CHECK(codes::effective_rank(*in.code_spec()) == k);

    std::vector<data::Token> all(256);
    for (int t = 0; t < 256; ++t) all[static_cast<std::size_t>(t)] = t;
    Matrix<float> x;
    in.encode(all, x);
    for (int t = 0; t < 256; ++t) {
      const auto code = codes::token_code(t, *in.code_spec());
      for (int head = 0; head < c.n_heads; ++head) {
        const int start = head * c.head_dim();
        CHECK(start % k == 0);
        for (int i = 0; i < c.head_dim(); ++i) {
          CHECK(x(t, start + i) == (code[i % k] ? 1.0F : 0.0F));
        }
      }
    }
  }
}

TEST_CASE("gradient flow into the learned table only") {
  for (auto kind : {InputKind::Learned, InputKind::FixedCode}) {
    const auto c = small_config(kind);
    const auto p = init_model(c, 2);
    const auto in = InputInterface::for_config(c, 1);
    auto g = build_graph(c, p, in, random_tokens(12, 16, 3), 1, 12);
    const auto targets = random_tokens(12, 16, 4);
    g.tape.backward(
        kernel::softmax_cross_entropy(g.tape, g.logits, std::span<const data::Token>(targets)));
    if (kind == InputKind::Learned) {
      REQUIRE(p.arrays[0].info.name == "input.table");
      CHECK(g.tape.grad(g.params[0]).norm() > 0.0F);
    } else {
      CHECK_FALSE(g.tape.requires_grad(g.inputs));
      CHECK_FALSE(p.contains("input.table"));
    }
  }
}

TEST_CASE("model gradient agrees with a directional finite difference") {
  for (auto kind : {InputKind::Learned, InputKind::FixedCode}) {
    CAPTURE(to_string(kind));
    const auto c = small_config(kind);
    const auto p = init_model(c, 5);
    const auto in = InputInterface::for_config(c, 1);
    const auto batch = random_batch(2, 8, 16, 6);
    const auto base = loss_and_grads(c, p, in, batch);

    Rng rng(8);
    std::vector<Matrix<float>> dir;
    double analytic = 0.0;
    for (std::size_t i = 0; i < p.arrays.size(); ++i) {
      Matrix<float> u(p.arrays[i].value.rows(), p.arrays[i].value.cols());
      for (Index j = 0; j < u.size(); ++j) u.data()[j] = static_cast<float>(rng.normal());
      analytic += static_cast<double>(base.grads[i].cwiseProduct(u).sum());
      dir.push_back(std::move(u));
    }
    auto shifted = [&](float h) {
      Parameters q = p;
      for (std::size_t i = 0; i < q.arrays.size(); ++i) q.arrays[i].value += h * dir[i];
      auto g = build_graph(c, q, in, batch.tokens, batch.batch, batch.time, false);
      const auto loss = kernel::softmax_cross_entropy(
          g.tape, g.logits, std::span<const data::Token>(batch.targets));
      return static_cast<double>(g.tape.value(loss)(0, 0));
    };
    // The direction has norm ~sqrt(#params), so the step along it is small.
    const float h = 1e-4F;
    const double numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
    CHECK(std::abs(numeric - analytic) <= 1e-2 * std::abs(analytic));
  }
}

TEST_CASE("learning-rate schedule") {
  OptimizerConfig o;
  o.peak_lr = 1e-3;
  o.total_steps = 200;
  o.warmup_steps = 20;
  CHECK(learning_rate(o, 0) == doctest::Approx(1e-3 / 20));
  CHECK(learning_rate(o, 19) == doctest::Approx(1e-3));
  CHECK(learning_rate(o, 199) == 0.0);
  for (int s = 20; s < 199; ++s) CHECK(learning_rate(o, s + 1) <= learning_rate(o, s));
  // Midpoint of the cosine segment sits halfway between peak and floor.
  CHECK(learning_rate(o, 20 + (199 - 20) / 2) == doctest::Approx(5e-4).epsilon(0.02));
  CHECK(default_warmup_steps(1000) == 28);
  CHECK(default_warmup_steps(100) == 10);
  CHECK(default_warmup_steps(5212) == 150);
}

TEST_CASE("clipping bounds the applied gradient norm") {
  const auto c = small_config(InputKind::FixedCode);
  OptimizerConfig o;
  o.total_steps = 10;
  o.peak_lr = 0.05;
  auto state = make_train_state(c, o, 1);
  const auto in = InputInterface::for_config(c, 1);
  bool saw_clip = false;
  for (int i = 0; i < 10; ++i) {
    const auto m = train_step(state, in, random_batch(2, 12, 16, 100 + i));
    CHECK(m.clipped_grad_norm <= 1.0 + 1e-6);
    if (m.grad_norm > 1.0) {
      saw_clip = true;
      CHECK(m.clipped_grad_norm == doctest::Approx(1.0));
    } else {
      CHECK(m.clipped_grad_norm == m.grad_norm);
    }
  }
  CHECK(saw_clip);
  CHECK(state.step == 10);
}

TEST_CASE("training is deterministic and aborts on a non-finite loss") {
  const auto c = small_config(InputKind::AffineRecoded);
  OptimizerConfig o;
  o.total_steps = 6;
  auto a = make_train_state(c, o, 4);
  auto b = make_train_state(c, o, 4);
  const auto in = InputInterface::for_config(c, 2);
  for (int i = 0; i < 6; ++i) {
    const auto batch = random_batch(2, 12, 16, static_cast<std::uint64_t>(i));
    const auto ma = train_step(a, in, batch);
    const auto mb = train_step(b, in, batch);
    CHECK(std::bit_cast<std::uint64_t>(ma.loss) == std::bit_cast<std::uint64_t>(mb.loss));
  }
  CHECK(same_parameters(a.params, b.params));

  a.params.at("output.weight")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const int step = a.step;
  try {
    train_step(a, in, random_batch(2, 12, 16, 50));
    FAIL("expected NonFiniteLoss");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonFiniteLoss);
  }
  CHECK(a.step == step);
}

TEST_CASE("evaluation at initialization is near uniform") {
  for (auto kind : {InputKind::Learned, InputKind::FixedCode, InputKind::AffineRecoded}) {
    ModelConfig c;
    c.context_len = 64;
    c.input_kind = kind;
    const auto p = init_model(c, 1);
    const auto in = InputInterface::for_config(c, 1);
    std::vector<data::Batch> stream{random_batch(2, 64, 256, 1), random_batch(1, 64, 256, 2)};
    const auto m = evaluate(c, p, in, stream);
    CHECK(std::abs(m.val_loss - std::log(256.0)) < 0.2);
    CHECK(m.val_ppl == std::exp(m.val_loss));
    CHECK(m.tokens_evaluated == 3 * 64);
    const auto again = evaluate(c, p, in, stream);
    CHECK(again.val_loss == m.val_loss);
  }
  const auto c = small_config(InputKind::FixedCode);
  CHECK_THROWS_AS(evaluate(c, init_model(c, 1), InputInterface::for_config(c, 1), {}), Error);
}

TEST_CASE("a trained model continues the memorized phrase") {
  const std::string phrase = "The quick brown fox jumps over the lazy dog. ";
  std::string text;
  while (text.size() < 1000) text += phrase;
  text.resize(1000);

  ModelConfig c;
  c.context_len = 64;
  OptimizerConfig o;
  o.total_steps = 300;
  o.peak_lr = 3e-3;
  o.warmup_steps = default_warmup_steps(o.total_steps);
  auto state = make_train_state(c, o, 1);
  const auto in = InputInterface::for_config(c, 1);
  data::BatchStream stream({data::tokenize_bytes({0, text})}, 64, 4, 1);
  double loss = 0.0;
  for (int i = 0; i < o.total_steps; ++i) loss = train_step(state, in, stream.next()).loss;
  CHECK(loss < 0.1);

  const auto prompt = data::tokenize_bytes({0, "The quick brown"});
  const auto out = sample_text(c, state.params, in, prompt, 60, 0.0, 0);
  const std::string expected = (phrase + phrase).substr(0, 15 + 60);
  CHECK(data::detokenize(out) == expected);
  CHECK(sample_text(c, state.params, in, prompt, 60, 0.0, 99) == out);

  const auto warm = sample_text(c, state.params, in, prompt, 30, 0.8, 5);
  CHECK(warm == sample_text(c, state.params, in, prompt, 30, 0.8, 5));
  CHECK(warm.size() == prompt.size() + 30);

  CHECK(sample_text(c, state.params, in, prompt, 0, 1.0, 1) == prompt);
  CHECK_THROWS_AS(sample_text(c, state.params, in, prompt, 3, -1.0, 1), Error);
}

TEST_CASE("checkpoint round trip") {
  for (auto kind : {InputKind::Learned, InputKind::FixedCode, InputKind::AffineRecoded}) {
    CAPTURE(to_string(kind));
    auto c = small_config(kind);
    Checkpoint ckpt;
    ckpt.config = c;
    ckpt.params = init_model(c, 9);
    ckpt.step = 17;
    ckpt.seed = 9;
    const auto in = InputInterface::for_config(c, 6);
    ckpt.code_spec = in.code_spec();

    std::stringstream ss;
    write_checkpoint(ss, ckpt);
    const auto bytes = ss.str();
    const auto back = read_checkpoint(ss);
    CHECK(back.step == 17);
    CHECK(back.seed == 9);
    CHECK(back.config.input_kind == kind);
    CHECK(same_parameters(back.params, ckpt.params));
    const auto rebuilt = back.input_interface();
    CHECK(rebuilt.kind() == kind);
    const auto tokens = random_tokens(12, 16, 2);
    CHECK(bit_identical(forward(c, ckpt.params, in, tokens, 1, 12),
                        forward(back.config, back.params, rebuilt, tokens, 1, 12)));

    std::stringstream again;
    write_checkpoint(again, back);
    CHECK(again.str() == bytes);

    std::stringstream truncated(bytes.substr(0, bytes.size() - 8));
    CHECK_THROWS_AS(read_checkpoint(truncated), Error);
  }
  std::stringstream junk("not a checkpoint\n");
  CHECK_THROWS_AS(read_checkpoint(junk), Error);
}

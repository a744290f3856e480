#pragma once

// Decoder-only transformer with a pluggable input interface.
//
// Block structure (pre-norm, no dropout):
//   h = h + Wo * attn(rope(Wq LN1(h)), rope(Wk LN1(h)), Wv LN1(h))
//   h = h + W2 * gelu(W1 LN2(h))
// followed by a final LN and an untied output projection to V logits.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tablefree/config.hpp"
#include "tablefree/data.hpp"
#include "tablefree/dense.hpp"
#include "tablefree/tape.hpp"
#include "tablefree/token_codes.hpp"

namespace tablefree::lm {

enum class InputKind { Learned, FixedCode, AffineRecoded };

std::string_view to_string(InputKind kind);
// Accepts learned, fixed, fixed_code, affine, affine_recoded.
InputKind parse_input_kind(std::string_view text);

struct ModelConfig {
  int vocab_size = data::kByteVocabulary;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int context_len = 256;
  int mlp_ratio = 4;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  InputKind input_kind = InputKind::FixedCode;

  int head_dim() const { return d_model / n_heads; }
  // Throws InvalidConfig on any violated divisibility rule.
  void validate() const;
};

// model.* keys; missing keys keep their defaults.
ModelConfig read_model_config(const KeyValues& kv);
void write_model_config(KeyValues& kv, const ModelConfig& config);

struct ParameterInfo {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  bool is_input_table = false;
  // Weight matrices decay; norm gains/shifts and biases do not.
  bool matrix = false;
};

// Every trainable array the config implies, in canonical order. Only the
// learned-input variant has "input.table" [V, d].
std::vector<ParameterInfo> parameter_layout(const ModelConfig& config);
std::int64_t trainable_parameter_count(const ModelConfig& config);

struct NamedArray {
  ParameterInfo info;
  Matrix<float> value;
};

struct Parameters {
  std::vector<NamedArray> arrays;

  const Matrix<float>& at(std::string_view name) const;
  Matrix<float>& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::int64_t count() const;
};

// Linear weights and the learned input table ~ N(0, 0.02^2) truncated at 2
// sigma, biases and shifts 0, gains 1. Deterministic in `seed`.
Parameters init_model(const ModelConfig& config, std::uint64_t seed);

// Source of the d-dimensional token vectors entering the first block.
class InputInterface {
 public:
  static InputInterface learned(int vocab_size, int d_model);
  // spec must have no recoder.
  static InputInterface fixed_code(codes::CodeSpec spec);
  // spec must carry a recoder.
  static InputInterface affine_recoded(codes::CodeSpec spec);
  // Non-trainable lookup of precomputed rows.
  static InputInterface frozen_lookup(codes::FrozenTable table);

  // fixed/affine interfaces for `config`; the affine recoder comes from
  // sample_recoder(K, recoder_seed).
  static InputInterface for_config(const ModelConfig& config, std::uint64_t recoder_seed);

  InputKind kind() const { return kind_; }
  bool frozen() const { return table_.has_value(); }
  int vocab_size() const { return vocab_size_; }
  int width() const { return width_; }
  const std::optional<codes::CodeSpec>& code_spec() const { return spec_; }
  // V*d for the learned table, 0 otherwise.
  std::int64_t trainable_parameter_count() const;

  // Fills `out` ([ids.size(), d]) for the non-learned variants.
  void encode(std::span<const data::Token> ids, Matrix<float>& out) const;

 private:
  InputInterface(InputKind kind, int vocab_size, int width);

  InputKind kind_;
  int vocab_size_;
  int width_;
  std::optional<codes::CodeSpec> spec_;
  std::optional<codes::FrozenTable> table_;
};

// Tape nodes of one forward pass; params[i] mirrors Parameters::arrays[i].
struct Graph {
  kernel::Tape<float> tape;
  std::vector<kernel::Var> params;
  kernel::Var inputs;
  kernel::Var logits;
};

// Records the forward pass for tokens [batch, time] (row-major). Parameters
// enter as constants when `track_gradients` is false.
// Throws ShapeMismatch if time > context_len, TokenOutOfRange for bad ids.
Graph build_graph(const ModelConfig& config, const Parameters& params,
                  const InputInterface& input, std::span<const data::Token> tokens, int batch,
                  int time, bool track_gradients = true);

// Logits [batch*time, V].
Matrix<float> forward(const ModelConfig& config, const Parameters& params,
                      const InputInterface& input, std::span<const data::Token> tokens, int batch,
                      int time);

struct OptimizerConfig {
  double peak_lr = 4.0e-4;
  double min_lr = 0.0;
  int warmup_steps = 10;
  int total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  bool decay_input_table = true;
};

// max(10, total * 150 / 5212).
int default_warmup_steps(int total_steps);

// Linear warmup to peak over warmup_steps (step s gets peak * (s+1) / warmup),
// then cosine decay reaching min_lr at the final step total_steps - 1.
double learning_rate(const OptimizerConfig& opt, int step);

struct TrainState {
  ModelConfig config;
  OptimizerConfig opt;
  Parameters params;
  std::vector<Matrix<float>> first_moment;
  std::vector<Matrix<float>> second_moment;
  int step = 0;
  std::uint64_t seed = 0;
};

TrainState make_train_state(const ModelConfig& config, const OptimizerConfig& opt,
                            std::uint64_t seed);

struct StepMetrics {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;          // global L2 norm before clipping
  double clipped_grad_norm = 0.0;  // norm actually applied
};

// Forward, cross-entropy, backward, global-norm clipping, AdamW. Throws
// NonFiniteLoss (state untouched) when the loss is NaN or infinite.
StepMetrics train_step(TrainState& state, const InputInterface& input, const data::Batch& batch);

struct EvalMetrics {
  double val_loss = 0.0;
  double val_ppl = 0.0;
  std::int64_t tokens_evaluated = 0;
};

// Token-weighted mean next-token loss. Throws EmptyStream.
EvalMetrics evaluate(const ModelConfig& config, const Parameters& params,
                     const InputInterface& input, std::span<const data::Batch> batches);

// Autoregressive continuation of `prompt`; temperature 0 means argmax.
std::vector<data::Token> sample_text(const ModelConfig& config, const Parameters& params,
                                     const InputInterface& input,
                                     std::span<const data::Token> prompt, int n_tokens,
                                     double temperature, std::uint64_t seed);

// Header: "tablefree-checkpoint v1" line, then key = value config lines
// (model.*, code.*, step, seed) up to a "---" line. Body: per array, a
// uint32 name length, the name, uint64 rows, uint64 cols, rows*cols
// little-endian float32.
struct Checkpoint {
  ModelConfig config;
  std::optional<codes::CodeSpec> code_spec;
  Parameters params;
  int step = 0;
  std::uint64_t seed = 0;

  InputInterface input_interface() const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tablefree::lm

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tablefree/config.hpp"
#include "tablefree/data.hpp"
#include "tablefree/transformer.hpp"

namespace tablefree::experiment {

// Stable process exit codes.
enum ExitCode : int {
  kSuccess = 0,
  kVerificationFailure = 1,
  kConfigError = 2,
  kRuntimeFailure = 3,
};

int exit_code_for(Errc code);

struct RunConfig {
  lm::ModelConfig model;
  std::uint64_t recoder_seed = 1;
  std::string corpus;
  data::CorpusFormat corpus_format = data::CorpusFormat::Auto;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 1234;
  int batch_size = 8;
  lm::OptimizerConfig optimizer;
  int eval_every = 0;        // 0: evaluate only at the end
  int eval_max_batches = 0;  // 0: whole validation split
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<lm::InputKind> variants{lm::InputKind::Learned, lm::InputKind::FixedCode,
                                      lm::InputKind::AffineRecoded};
  std::string out_dir = "runs";

  // Throws InvalidConfig.
  void validate() const;
};

// Keys: model.*, data.corpus, data.format, data.val_fraction,
// data.split_seed, train.batch_size, train.total_steps, train.lr,
// train.min_lr, train.warmup_steps, train.beta1, train.beta2, train.eps,
// train.weight_decay, train.grad_clip, train.decay_input_table,
// train.eval_every, eval.max_batches, run.seeds, run.variants, run.out,
// code.recoder_seed. Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const KeyValues& kv, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::string& path);
KeyValues to_key_values(const RunConfig& config);

// <out_dir>/<variant>/seed_<seed>
std::filesystem::path run_directory(const RunConfig& config, lm::InputKind kind,
                                    std::uint64_t seed);

struct TrainRecord {
  int step = 0;
  std::int64_t tokens_seen = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct EvalRecord {
  int step = 0;
  std::int64_t tokens_seen = 0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
};

std::string format_record(const TrainRecord& r);
std::string format_record(const EvalRecord& r);

struct MetricsLog {
  std::vector<TrainRecord> train;
  std::vector<EvalRecord> eval;
};

MetricsLog read_metrics(const std::filesystem::path& path);

struct RunResult {
  EvalRecord final_eval;
  double final_train_loss = 0.0;
  std::filesystem::path directory;
};

// Data shared by every run of one config: the split is fixed across seeds
// and variants.
struct PreparedData {
  data::PartitionedCorpus corpus;
  std::vector<data::Batch> validation;
};

PreparedData prepare_data(const RunConfig& config);

// Trains one (variant, seed) run to total_steps, writing metrics.log and
// checkpoint.bin into run_directory(). One metrics line per step plus one
// per evaluation (every eval_every steps and after the last step).
RunResult train_run(const RunConfig& config, lm::InputKind kind, std::uint64_t seed,
                    const PreparedData& prepared, std::ostream* progress = nullptr);

struct SeedResult {
  std::uint64_t seed = 0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
  std::int64_t tokens_seen = 0;
};

struct VariantSummary {
  lm::InputKind kind = lm::InputKind::Learned;
  std::vector<SeedResult> seeds;
  double mean_val_loss = 0.0;
  double mean_val_ppl = 0.0;
  double relative_seed_range = 0.0;  // (max - min) / mean of val_ppl
  std::int64_t tokens_per_seed = 0;
};

struct RunReport {
  std::vector<VariantSummary> variants;
  std::vector<std::string> warnings;

  const VariantSummary& at(lm::InputKind kind) const;
};

// Arithmetic mean and (max - min) / mean; a single value has range 0.
double mean_of(const std::vector<double>& values);
double relative_seed_range(const std::vector<double>& values);

VariantSummary summarize(lm::InputKind kind, std::vector<SeedResult> seeds);

// Reads the final eval record of every configured (variant, seed).
// Throws MissingRuns if any is absent.
RunReport compare_runs(const RunConfig& config);

// Plain-text table: variant, tokens/seed, val loss, val ppl mean, rel. seed
// range, followed by the reference full-scale rows for context.
void render_report(std::ostream& out, const RunReport& report);

}  // namespace tablefree::experiment

// Command-line front end: code generation and verification, training,
// evaluation, comparison, table export and sampling.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "tablefree/experiment.hpp"
#include "tablefree/token_codes.hpp"
#include "tablefree/transformer.hpp"

namespace fs = std::filesystem;
using namespace tablefree;
using experiment::ExitCode;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string corpus;
  std::string out;
  std::string input_kind;
  std::optional<std::uint64_t> recoder_seed;
};

void add_run_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration file")->required();
  cmd->add_option("--seed", c.seed, "Training seed (default: every configured seed)");
  cmd->add_option("--corpus", c.corpus, "Override data.corpus");
  cmd->add_option("--out", c.out, "Override run.out");
  cmd->add_option("--input-kind", c.input_kind, "learned, fixed or affine");
  cmd->add_option("--recoder-seed", c.recoder_seed, "Override code.recoder_seed");
}

experiment::RunConfig load_config(const Common& c) {
  auto config = experiment::load_run_config(c.config);
  if (!c.corpus.empty()) config.corpus = c.corpus;
  if (!c.out.empty()) config.out_dir = c.out;
  if (c.recoder_seed) config.recoder_seed = *c.recoder_seed;
  if (!c.input_kind.empty()) {
    config.model.input_kind = lm::parse_input_kind(c.input_kind);
    config.variants = {config.model.input_kind};
  }
  if (c.seed) config.seeds = {*c.seed};
  config.validate();
  return config;
}

// The single (variant, seed) a command that reads one run refers to.
std::pair<lm::InputKind, std::uint64_t> single_run(const Common& c,
                                                    const experiment::RunConfig& config) {
  if (!c.seed && config.seeds.size() != 1) {
    throw Error(Errc::InvalidArgs, "--seed is required when the config lists several seeds");
  }
  const auto kind =
      c.input_kind.empty() ? config.model.input_kind : lm::parse_input_kind(c.input_kind);
  return {kind, c.seed ? *c.seed : config.seeds.front()};
}

codes::CodeSpec spec_from_args(std::int64_t vocab, int width,
                               const std::optional<std::uint64_t>& recoder_seed) {
  std::optional<codes::Recoder> recoder;
  if (recoder_seed) recoder = codes::sample_recoder(codes::minimal_width(vocab), *recoder_seed);
  return codes::CodeSpec(vocab, width, recoder);
}

int cmd_codegen(std::int64_t vocab, int width, const std::optional<std::uint64_t>& recoder_seed,
                const std::string& out, bool with_table) {
  const int k = codes::minimal_width(vocab);
  std::cout << "V=" << vocab << " K=" << k << " d=" << width << '\n';
  std::cout << "delta=" << vocab * static_cast<std::int64_t>(width)
            << " (trainable input parameters removed: V*d)\n";
  if (out.empty()) return ExitCode::kSuccess;
  const auto spec = spec_from_args(vocab, width, recoder_seed);
  fs::create_directories(out);
  const auto spec_path = fs::path(out) / "code_spec.txt";
  std::ofstream f(spec_path);
  if (!f) throw Error(Errc::IoFailure, "cannot write " + spec_path.string());
  codes::write_code_spec(f, spec);
  std::cout << "wrote " << spec_path.string() << '\n';
  if (with_table) {
    const auto table_path = fs::path(out) / "table.bin";
    codes::save_frozen_table(table_path.string(), codes::export_frozen_table(spec));
    std::cout << "wrote " << table_path.string() << '\n';
  }
  return ExitCode::kSuccess;
}

int cmd_verify(const std::string& spec_path, const std::string& table_path) {
  const auto spec = codes::load_code_spec(spec_path);
  bool ok = true;
  auto report = [&](const std::string& name, bool pass, const std::string& detail) {
    std::cout << name << ": " << (pass ? "pass" : "FAIL") << (detail.empty() ? "" : "  ")
              << detail << '\n';
    ok = ok && pass;
  };

  const auto inj = codes::verify_injectivity(spec);
  report("injectivity", inj.ok,
         inj.colliding_pair ? "tokens " + std::to_string(inj.colliding_pair->first) + " and " +
                                  std::to_string(inj.colliding_pair->second) + " collide"
                            : "");

  if (spec.full_vocabulary()) {
    const auto bal = codes::verify_balance(spec);
    report("balance", bal.balanced(),
           "each bit " + std::to_string(std::int64_t{1} << (spec.code_width() - 1)) +
               " ones, each pair pattern " +
               (spec.code_width() >= 2
                    ? std::to_string(std::int64_t{1} << (spec.code_width() - 2))
                    : std::string("n/a")));
  } else {
    std::cout << "balance: skipped  V=" << spec.vocab_size() << " < 2^K=" << (std::int64_t{1} << spec.code_width())
              << '\n';
  }

  const int rank = codes::effective_rank(spec);
  const bool rank_ok =
      spec.full_vocabulary() ? rank == spec.code_width() : rank <= spec.code_width();
  report("effective_rank", rank_ok,
         "rank=" + std::to_string(rank) + " K=" + std::to_string(spec.code_width()));

  const auto table = table_path.empty() ? codes::export_frozen_table(spec)
                                        : codes::load_frozen_table(table_path);
  const auto mismatch = codes::compare_with_encoding(table, spec);
  report("frozen_equivalence", !mismatch.has_value(),
         mismatch ? "first difference at token " + std::to_string(mismatch->token) + " column " +
                        std::to_string(mismatch->column)
                  : (table_path.empty() ? "in-memory export" : table_path));

  return ok ? ExitCode::kSuccess : ExitCode::kVerificationFailure;
}

int cmd_train(const Common& c) {
  const auto config = load_config(c);
  const auto prepared = experiment::prepare_data(config);
  std::cout << "train documents: " << prepared.corpus.train.size()
            << ", validation documents: " << prepared.corpus.validation.size() << '\n';
  for (auto kind : config.variants) {
    for (auto seed : config.seeds) {
      const auto r = experiment::train_run(config, kind, seed, prepared, &std::cout);
      std::cout << "finished " << r.directory.string() << " train_loss=" << r.final_train_loss
                << " val_loss=" << r.final_eval.val_loss << " val_ppl=" << r.final_eval.val_ppl
                << '\n';
    }
  }
  return ExitCode::kSuccess;
}

lm::Checkpoint checkpoint_for(const Common& c, const std::string& explicit_path,
                              experiment::RunConfig* config_out) {
  const auto config = load_config(c);
  if (config_out) *config_out = config;
  if (!explicit_path.empty()) return lm::load_checkpoint(explicit_path);
  const auto [kind, seed] = single_run(c, config);
  return lm::load_checkpoint(
      (experiment::run_directory(config, kind, seed) / "checkpoint.bin").string());
}

int cmd_eval(const Common& c, const std::string& checkpoint_path) {
  experiment::RunConfig config;
  const auto ckpt = checkpoint_for(c, checkpoint_path, &config);
  const auto prepared = experiment::prepare_data(config);
  const auto m = lm::evaluate(ckpt.config, ckpt.params, ckpt.input_interface(),
                              prepared.validation);
  std::cout << "input_kind=" << lm::to_string(ckpt.config.input_kind) << " step=" << ckpt.step
            << " seed=" << ckpt.seed << " val_loss=" << format_exact(m.val_loss)
            << " val_ppl=" << format_exact(m.val_ppl) << " tokens=" << m.tokens_evaluated
            << '\n';
  return ExitCode::kSuccess;
}

int cmd_compare(const Common& c) {
  auto config = experiment::load_run_config(c.config);
  if (!c.out.empty()) config.out_dir = c.out;
  const auto report = experiment::compare_runs(config);
  experiment::render_report(std::cout, report);
  return ExitCode::kSuccess;
}

int cmd_sample(const Common& c, const std::string& checkpoint_path, const std::string& prompt,
               int n_tokens, double temperature, std::uint64_t sample_seed) {
  const auto ckpt = checkpoint_for(c, checkpoint_path, nullptr);
  const auto ids = data::tokenize_bytes({0, prompt});
  const auto out = lm::sample_text(ckpt.config, ckpt.params, ckpt.input_interface(), ids,
                                   n_tokens, temperature, sample_seed);
  std::cout << data::detokenize(out) << '\n';
  return ExitCode::kSuccess;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Table-free token inputs: codes, verification and desk-scale training"};
  app.require_subcommand(1);

  std::int64_t vocab = 256;
  int width = 64;
  std::optional<std::uint64_t> code_recoder_seed;
  std::string code_out;
  bool with_table = false;
  auto* codegen = app.add_subcommand("codegen", "Print K and V*d; optionally write a code spec");
  codegen->add_option("--vocab", vocab, "Vocabulary size V")->check(CLI::PositiveNumber);
  codegen->add_option("--width", width, "Lift width d")->check(CLI::PositiveNumber);
  codegen->add_option("--recoder-seed", code_recoder_seed, "Sample an affine recoder");
  codegen->add_option("--out", code_out, "Directory for code_spec.txt");
  codegen->add_flag("--table", with_table, "Also write the frozen table (table.bin)");

  std::string spec_path;
  std::string table_path;
  auto* verify = app.add_subcommand("verify", "Run the code checks on a spec file");
  verify->add_option("spec", spec_path, "Code spec file")->required();
  verify->add_option("--table", table_path, "Frozen table file to compare");

  Common train_args;
  auto* train = app.add_subcommand("train", "Train configured runs");
  add_run_flags(train, train_args);

  Common eval_args;
  std::string eval_checkpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  add_run_flags(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint path (default: the run's)");

  Common compare_args;
  auto* compare = app.add_subcommand("compare", "Summarize every configured run");
  compare->add_option("--config", compare_args.config, "Run configuration file")->required();
  compare->add_option("--out", compare_args.out, "Override run.out");

  std::string export_spec;
  std::string export_out;
  auto* export_table = app.add_subcommand("export-table", "Write the frozen lookup table");
  export_table->add_option("spec", export_spec, "Code spec file")->required();
  export_table->add_option("--out", export_out, "Output table file")->required();

  Common sample_args;
  std::string sample_checkpoint;
  std::string prompt;
  int n_tokens = 200;
  double temperature = 0.8;
  std::uint64_t sample_seed = 0;
  auto* sample = app.add_subcommand("sample", "Generate text from a checkpoint");
  add_run_flags(sample, sample_args);
  sample->add_option("--checkpoint", sample_checkpoint, "Checkpoint path (default: the run's)");
  sample->add_option("--prompt", prompt, "Prompt text");
  sample->add_option("--tokens", n_tokens, "Tokens to generate")->check(CLI::NonNegativeNumber);
  sample->add_option("--temperature", temperature, "0 for argmax")->check(CLI::NonNegativeNumber);
  sample->add_option("--sample-seed", sample_seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ExitCode::kSuccess : ExitCode::kConfigError;
  }

  try {
    if (*codegen) return cmd_codegen(vocab, width, code_recoder_seed, code_out, with_table);
    if (*verify) return cmd_verify(spec_path, table_path);
    if (*train) return cmd_train(train_args);
    if (*eval) return cmd_eval(eval_args, eval_checkpoint);
    if (*compare) return cmd_compare(compare_args);
    if (*export_table) {
      codes::save_frozen_table(export_out,
                               codes::export_frozen_table(codes::load_code_spec(export_spec)));
      std::cout << "wrote " << export_out << '\n';
      return ExitCode::kSuccess;
    }
    if (*sample) {
      return cmd_sample(sample_args, sample_checkpoint, prompt, n_tokens, temperature,
                        sample_seed);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return experiment::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ExitCode::kRuntimeFailure;
  }
  return ExitCode::kSuccess;
}

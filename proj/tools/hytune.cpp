#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hytune/checkpoint.hpp"
#include "hytune/corpus.hpp"
#include "hytune/datagen.hpp"
#include "hytune/errors.hpp"
#include "hytune/experiment.hpp"
#include "hytune/manifest.hpp"
#include "hytune/planner.hpp"
#include "hytune/run_config.hpp"
#include "hytune/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hytune {
namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot read " + path.string());
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << text;
  if (!out) {
    throw Error("write failed for " + path.string());
  }
}

fs::path output_dir(const fs::path& dir) {
  fs::create_directories(dir);
  return dir;
}

/// Collects artifacts and writes the manifest once a command succeeds.
class ManifestWriter {
 public:
  ManifestWriter(std::string command, const std::vector<std::string>& argv, fs::path dir)
      : dir_(std::move(dir)) {
    manifest_.command = std::move(command);
    manifest_.argv = argv;
    manifest_.output_dir = dir_.string();
  }

  void config(const fs::path& path, std::string snapshot) {
    manifest_.config_path = path.string();
    manifest_.config_snapshot = std::move(snapshot);
  }
  void seeds(std::vector<std::uint64_t> s) { manifest_.seeds = std::move(s); }
  void add(const fs::path& file) { files_.push_back(file); }

  void write(const fs::path& path) {
    for (const fs::path& f : files_) {
      manifest_.artifacts.push_back(checksum_file(f, dir_));
    }
    manifest_.write(path);
  }

 private:
  fs::path dir_;
  RunManifest manifest_;
  std::vector<fs::path> files_;
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string mode = "self-instruct";
  std::optional<fs::path> seeds;
  std::optional<fs::path> source;
  std::optional<fs::path> structured;
  bool mock = false;
  std::string endpoint;
  std::uint64_t timeout_ms = 30000;
  std::size_t count = 16;
  std::uint64_t seed = 0;
  double malformed_rate = 0.0;
  GenerationOptions options;
  fs::path out;
};

void merge(GenerationResult& into, GenerationResult part) {
  into.records.insert(into.records.end(), std::make_move_iterator(part.records.begin()),
                      std::make_move_iterator(part.records.end()));
  into.stats.requests += part.stats.requests;
  into.stats.failed_requests += part.stats.failed_requests;
  into.stats.generated += part.stats.generated;
  into.stats.parse_failures += part.stats.parse_failures;
  into.stats.dedup_removed += part.stats.dedup_removed;
  into.stats.emitted += part.stats.emitted;
  for (std::string& e : part.stats.errors) {
    into.stats.errors.push_back(std::move(e));
  }
}

int run_gen_data(const GenDataArgs& a, const std::vector<std::string>& argv) {
  std::unique_ptr<CompletionClient> client;
  if (a.mock == !a.endpoint.empty()) {
    throw ValidationError("gen-data: pass exactly one of --mock or --endpoint");
  }
  if (a.mock) {
    client = std::make_unique<MockCompletionClient>(
        MockOptions{.seed = a.seed, .malformed_rate = a.malformed_rate});
  } else {
    client = std::make_unique<HttpCompletionClient>(a.endpoint,
                                                    std::chrono::milliseconds(a.timeout_ms));
  }

  GenerationResult result;
  if (a.mode == "self-instruct") {
    if (!a.seeds) {
      throw ValidationError("gen-data: --seeds is required for self-instruct");
    }
    const std::vector<InstructionRecord> seeds = read_instructions(*a.seeds);
    if (seeds.empty()) {
      throw ValidationError("gen-data: seed file " + a.seeds->string() + " has no records");
    }
    result = self_instruct_expand(seeds, *client, a.count, a.seed, a.options);
  } else {
    if (!a.source && !a.structured) {
      throw ValidationError("gen-data: self-qa needs --source and/or --structured");
    }
    if (a.source) {
      const std::vector<Document> docs = read_documents(*a.source);
      if (docs.empty()) {
        throw ValidationError("gen-data: source file " + a.source->string() + " has no documents");
      }
      for (const Document& d : docs) {
        if (d.kind != Kind::pretrain) {
          continue;
        }
        merge(result, self_qa_unstructured(d, *client, a.count, a.options));
        if (!result.stats.errors.empty()) {
          break;
        }
      }
    }
    if (a.structured && result.stats.errors.empty()) {
      const std::vector<StructuredRecord> recs = read_structured(*a.structured);
      if (recs.empty()) {
        throw ValidationError("gen-data: structured file " + a.structured->string() +
                              " has no records");
      }
      for (const StructuredRecord& r : recs) {
        merge(result, self_qa_structured(r, *client, a.count, a.options));
        if (!result.stats.errors.empty()) {
          break;
        }
      }
    }
    // Near-duplicates across sources count as dedup removals too.
    std::size_t removed = 0;
    result.records = dedup_filter(result.records, a.options.dedup_threshold, &removed);
    result.stats.dedup_removed += removed;
    result.stats.emitted -= removed;
  }

  std::ostringstream records;
  write_instructions(records, result.records);
  write_text(a.out, records.str());

  const GenerationStats& s = result.stats;
  json stats;
  stats["mode"] = a.mode;
  stats["client"] = a.mock ? "mock" : "http";
  stats["client_calls"] = client->calls();
  stats["requests"] = s.requests;
  stats["failed_requests"] = s.failed_requests;
  stats["generated"] = s.generated;
  stats["emitted"] = s.emitted;
  stats["parse_failures"] = s.parse_failures;
  stats["dedup_removed"] = s.dedup_removed;
  stats["reconciles"] = s.reconciles();
  stats["errors"] = s.errors;
  const fs::path stats_path = a.out.string() + ".stats.json";
  write_text(stats_path, stats.dump(2) + "\n");

  const fs::path dir = a.out.has_parent_path() ? a.out.parent_path() : fs::path(".");
  ManifestWriter m("gen-data", argv, dir);
  m.seeds({a.seed});
  m.add(a.out);
  m.add(stats_path);
  m.write(a.out.string() + ".manifest.json");

  std::cout << "emitted " << s.emitted << " of " << s.generated << " generated (parse failures "
            << s.parse_failures << ", dedup removed " << s.dedup_removed << ")\n";
  for (const std::string& e : s.errors) {
    std::cerr << "error: " << e << '\n';
  }
  return s.errors.empty() ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------
// mix

int run_mix(const fs::path& corpus, std::uint64_t seed, std::uint64_t epoch, const fs::path& out,
            const std::vector<std::string>& argv) {
  const std::vector<Document> docs = read_corpus_dir(corpus);
  if (docs.empty()) {
    throw ValidationError("mix: no documents under " + corpus.string());
  }
  const std::vector<Document> shuffled = hybrid_shuffle(make_plan(docs, seed, epoch));
  std::ostringstream text;
  write_documents(text, shuffled);
  write_text(out, text.str());

  const MixtureStats st = mixture_stats(shuffled);
  json stats;
  stats["seed"] = seed;
  stats["epoch"] = epoch;
  stats["total_documents"] = st.total_documents;
  stats["total_tokens"] = st.total_tokens;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const std::string name = to_string(static_cast<Stream>(s));
    stats["streams"][name] = {{"documents", st.documents[s]},
                              {"tokens", st.tokens[s]},
                              {"token_share", st.token_share[s]}};
  }
  const fs::path stats_path = out.string() + ".stats.json";
  write_text(stats_path, stats.dump(2) + "\n");

  const fs::path dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  ManifestWriter m("mix", argv, dir);
  m.seeds({seed});
  m.add(out);
  m.add(stats_path);
  m.write(out.string() + ".manifest.json");
  std::cout << "mixed " << st.total_documents << " documents (" << st.total_tokens
            << " tokens) into " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path config;
  fs::path out;
  std::optional<fs::path> resume;
  std::optional<fs::path> init;
  std::optional<std::uint64_t> max_steps;
};

int run_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  const RunConfig config = load_run_config(a.config);
  if (a.resume && a.init) {
    throw ValidationError("train: --resume and --init are mutually exclusive");
  }
  TrainRunConfig run{config.model, config.phase_hyper(), config.run.seed, config.run.loss_policy};
  run.validate();
  const std::vector<Document> corpus = load_training_corpus(config);

  TrainState state;
  if (a.resume) {
    const CheckpointData data = read_checkpoint(*a.resume);
    if (!(data.config == config.model)) {
      throw ValidationError("train: checkpoint " + a.resume->string() +
                            " was written for a different model configuration");
    }
    state = state_from_checkpoint(data);
  } else if (a.init) {
    const CheckpointData data = read_checkpoint(*a.init);
    if (!(data.config == config.model)) {
      throw ValidationError("train: checkpoint " + a.init->string() +
                            " was written for a different model configuration");
    }
    state = state_from_params(params_from_checkpoint(data));
  } else {
    state = fresh_state(run);
  }

  const fs::path dir = output_dir(a.out);
  const fs::path ckpt = dir / "checkpoint.ckpt";
  const std::uint64_t every = config.run.checkpoint_every;
  while (!finished(run, state)) {
    TrainOptions opt;
    std::optional<std::uint64_t> stop = a.max_steps;
    if (every > 0) {
      const std::uint64_t next = state.step + every;
      stop = stop ? std::min(*stop, next) : next;
    }
    if (stop && *stop <= state.step) {
      break;
    }
    opt.max_steps = stop;
    opt.on_step = [](const LossPoint& p) {
      if (p.step % 10 == 0) {
        std::cerr << "step " << p.step << " tokens " << p.tokens_seen << " loss " << p.loss
                  << '\n';
      }
    };
    state = train(run, corpus, std::move(state), opt);
    write_checkpoint(ckpt, state_checkpoint(config.model, state));
    if (a.max_steps && state.step >= *a.max_steps) {
      break;
    }
  }
  write_checkpoint(ckpt, state_checkpoint(config.model, state));
  write_text(dir / "trajectory.json", trajectory_json(state.trajectory) + "\n");
  write_text(dir / "trajectory.txt", trajectory_table(state.trajectory));

  ManifestWriter m("train", argv, dir);
  m.config(a.config, render_run_config(config));
  m.seeds({config.run.seed});
  m.add(ckpt);
  m.add(dir / "trajectory.json");
  m.add(dir / "trajectory.txt");
  m.write(dir / "manifest.json");

  std::cout << "steps " << state.step << ", tokens " << state.tokens_seen << " of "
            << run.hyper.total_tokens << (finished(run, state) ? " (done)" : " (interrupted)")
            << '\n';
  if (!state.trajectory.empty()) {
    std::cout << "final loss " << state.trajectory.back().loss << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int run_eval(const fs::path& checkpoint, const fs::path& eval_set, const std::string& policy,
             const std::optional<fs::path>& out, const std::vector<std::string>& argv) {
  const CheckpointData data = read_checkpoint(checkpoint);
  const ModelParams params = params_from_checkpoint(data);
  const std::vector<Document> docs = read_documents(eval_set);
  const LossPolicy lp = parse_loss_policy(policy);
  const double ppl = perplexity(params, data.config, docs, lp);
  std::cout << "perplexity " << ppl << '\n';
  if (out) {
    const fs::path dir = output_dir(*out);
    json j;
    j["checkpoint"] = checkpoint.string();
    j["eval_set"] = eval_set.string();
    j["documents"] = docs.size();
    j["loss_policy"] = policy;
    j["perplexity"] = ppl;
    write_text(dir / "eval.json", j.dump(2) + "\n");
    ManifestWriter m("eval", argv, dir);
    m.add(dir / "eval.json");
    m.write(dir / "manifest.json");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// compare-regimes

int run_compare(const fs::path& config_path, const fs::path& out,
                const std::vector<std::string>& argv) {
  const RunConfig config = load_run_config(config_path);
  const ExperimentSpec spec = build_experiment(config);
  const ForgettingReport report =
      run_forgetting_experiment(spec, [](const std::string& msg) { std::cerr << msg << '\n'; });
  const fs::path dir = output_dir(out);
  write_text(dir / "report.json", report_json(report) + "\n");
  write_text(dir / "report.txt", report_table(report));
  ManifestWriter m("compare-regimes", argv, dir);
  m.config(config_path, render_run_config(config));
  m.seeds(spec.seeds);
  m.add(dir / "report.json");
  m.add(dir / "report.txt");
  m.write(dir / "manifest.json");
  std::cout << report_table(report);
  return 0;
}

// ---------------------------------------------------------------------------
// plan

int run_plan(const std::string& preset, const std::string& phase, std::size_t stages,
             std::size_t dp_ranks, bool as_json, const std::optional<fs::path>& out,
             const std::vector<std::string>& argv) {
  const PlanReport report = make_plan_report(load_preset(preset, phase), stages, dp_ranks);
  const std::string j = plan_report_json(report);
  const std::string table = plan_report_table(report);
  std::cout << (as_json ? j + "\n" : table);
  if (out) {
    const fs::path dir = output_dir(*out);
    write_text(dir / "plan.json", j + "\n");
    write_text(dir / "plan.txt", table);
    ManifestWriter m("plan", argv, dir);
    m.add(dir / "plan.json");
    m.add(dir / "plan.txt");
    m.write(dir / "manifest.json");
  }
  return 0;
}

int run(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Hybrid-tuning toolkit: data synthesis, mixing, training, evaluation, planning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "hytune 0.1.0");

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Synthesize instruction records");
  gen_cmd->add_option("--mode", gen.mode, "self-instruct or self-qa")
      ->check(CLI::IsMember({"self-instruct", "self-qa"}));
  gen_cmd->add_option("--seeds", gen.seeds, "Seed instructions (JSON lines)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--source", gen.source, "Pretrain documents for self-qa (JSON lines)")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--structured", gen.structured, "Structured records for self-qa (JSON lines)")
      ->check(CLI::ExistingFile);
  gen_cmd->add_flag("--mock", gen.mock, "Use the offline mock completion client");
  gen_cmd->add_option("--endpoint", gen.endpoint, "Completion service URL");
  gen_cmd->add_option("--timeout-ms", gen.timeout_ms, "Per-request timeout")->capture_default_str();
  gen_cmd->add_option("--count", gen.count,
                      "Records to emit (self-instruct) or pairs per source (self-qa)")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Sampling and mock seed")->capture_default_str();
  gen_cmd->add_option("--malformed-rate", gen.malformed_rate, "Mock: share of malformed blocks")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--pairs-per-request", gen.options.pairs_per_request, "Q/A pairs asked for per request")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gen_cmd->add_option("--few-shot", gen.options.few_shot, "Seed examples shown per prompt")->capture_default_str();
  gen_cmd->add_option("--max-in-flight", gen.options.max_in_flight, "Concurrent requests")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gen_cmd->add_option("--retries", gen.options.retry_budget, "Retries per failed request")->capture_default_str();
  gen_cmd->add_option("--dedup-threshold", gen.options.dedup_threshold, "Trigram Jaccard at or above which a record is a duplicate")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output records (JSON lines)")->required();

  fs::path mix_corpus;
  fs::path mix_out;
  std::uint64_t mix_seed_value = 0;
  std::uint64_t mix_epoch = 0;
  CLI::App* mix_cmd = app.add_subcommand("mix", "Shuffle the four streams into one training order");
  mix_cmd->add_option("--corpus", mix_corpus, "Directory of *.jsonl documents")
      ->required()
      ->check(CLI::ExistingDirectory);
  mix_cmd->add_option("--seed", mix_seed_value, "Shuffle seed")->required();
  mix_cmd->add_option("--epoch", mix_epoch, "Epoch index")->capture_default_str();
  mix_cmd->add_option("--out", mix_out, "Output documents (JSON lines)")->required();

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "Train under a token budget");
  train_cmd->add_option("--config", train_args.config, "Run config")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "Continue from a training checkpoint")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--init", train_args.init,
                        "Start from the weights of a checkpoint with a fresh optimizer")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--max-steps", train_args.max_steps, "Stop after this many total steps");

  fs::path eval_ckpt;
  fs::path eval_set;
  std::string eval_policy = "full";
  std::optional<fs::path> eval_out;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Perplexity of a checkpoint on documents");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--eval-set", eval_set, "Documents (JSON lines)")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--loss-policy", eval_policy, "Positions scored")
      ->check(CLI::IsMember({"full", "response_only"}))
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Output directory");

  fs::path cmp_config;
  fs::path cmp_out;
  CLI::App* cmp_cmd =
      app.add_subcommand("compare-regimes", "Sequential versus hybrid forgetting experiment");
  cmp_cmd->add_option("--config", cmp_config, "Run config")
      ->required()
      ->check(CLI::ExistingFile);
  cmp_cmd->add_option("--out", cmp_out, "Output directory")->required();

  std::string plan_preset;
  std::string plan_phase = "pretrain";
  std::size_t plan_stages = 1;
  std::size_t plan_ranks = 1;
  bool plan_json = false;
  std::optional<fs::path> plan_out;
  CLI::App* plan_cmd = app.add_subcommand("plan", "Pipeline split and ZeRO-1 memory per rank");
  std::string presets;
  for (const std::string& n : preset_names()) {
    presets += (presets.empty() ? "" : ", ") + n;
  }
  plan_cmd->add_option("--preset", plan_preset, "One of: " + presets)->required();
  plan_cmd->add_option("--phase", plan_phase)
      ->check(CLI::IsMember({"pretrain", "finetune"}))
      ->capture_default_str();
  plan_cmd->add_option("--stages", plan_stages, "Pipeline stages")->capture_default_str();
  plan_cmd->add_option("--dp-ranks", plan_ranks, "Data-parallel ranks")->capture_default_str();
  plan_cmd->add_flag("--json", plan_json, "Print JSON instead of the table");
  plan_cmd->add_option("--out", plan_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  if (*gen_cmd) return run_gen_data(gen, args);
  if (*mix_cmd) return run_mix(mix_corpus, mix_seed_value, mix_epoch, mix_out, args);
  if (*train_cmd) return run_train(train_args, args);
  if (*eval_cmd) return run_eval(eval_ckpt, eval_set, eval_policy, eval_out, args);
  if (*cmp_cmd) return run_compare(cmp_config, cmp_out, args);
  if (*plan_cmd) {
    return run_plan(plan_preset, plan_phase, plan_stages, plan_ranks, plan_json, plan_out, args);
  }
  return kExitValidation;
}

}  // namespace
}  // namespace hytune

int main(int argc, char** argv) {
  try {
    return hytune::run(argc, argv);
  } catch (const hytune::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return hytune::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return hytune::kExitRuntime;
  }
}

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "hytune/manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource = HYTUNE_SOURCE_DIR;
const fs::path kFixtures = kSource / "tests/fixtures";

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "hytune_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Result run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch() / ("stdout" + std::to_string(counter));
  const fs::path err = scratch() / ("stderr" + std::to_string(counter++));
  const std::string cmd = std::string("\"") + HYTUNE_CLI + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

void write_config(const fs::path& path, const std::string& run_section,
                  const std::string& total = "2400") {
  std::ofstream out(path);
  out << "[Architecture hyperparameters]\n"
         "Layers = 1\nHidden dim. = 16\nAttention heads = 2\nSequence length = 32\n\n"
         "[Pretraining hyperparameters]\n"
         "Global Batch Size = 2\nLearning rate = 3e-3\nTotal tokens = " << total << "\n"
         "Min. learning rate = 3e-4\nWarmup tokens = 100\nDecay tokens = " << total << "\n"
         "Decay style = cosine\nAdam (beta1, beta2) = (0.9, 0.95)\nWeight decay = 0.01\n"
         "Gradient clipping = 1.0\n\n"
         "[Multitask finetuning hyperparameters]\n"
         "Global Batch Size = 2\nLearning rate = 1e-3\nTotal tokens = " << total << "\n"
         "Warmup tokens = 0\nDecay style = constant\nWeight decay = 1e-4\n\n"
         "[Run]\n" << run_section;
}

void check_manifest(const fs::path& manifest, const std::string& command) {
  REQUIRE(fs::exists(manifest));
  const json j = json::parse(slurp(manifest));
  CHECK(j["command"] == command);
  CHECK(j["argv"].size() >= 2);
  const fs::path dir = j["output_dir"].get<std::string>();
  for (const auto& a : j["artifacts"]) {
    const fs::path file = dir / a["path"].get<std::string>();
    const hytune::ArtifactChecksum now = hytune::checksum_file(file);
    CHECK(now.fnv1a64 == a["fnv1a64"].get<std::string>());
    CHECK(now.bytes == a["bytes"].get<std::uint64_t>());
  }
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("plan --preset bloom-7b --bogus").code == 2);
  const Result r = run_cli("plan --preset nope");
  CHECK(r.code == 2);
  CHECK(r.err.find("bloom-176b") != std::string::npos);
}

TEST_CASE("help documents every flag") {
  const std::pair<const char*, std::vector<const char*>> cases[] = {
      {"gen-data", {"--seeds", "--mode", "--mock", "--out", "--source", "--structured"}},
      {"mix", {"--corpus", "--seed", "--epoch", "--out"}},
      {"train", {"--config", "--resume", "--max-steps", "--out"}},
      {"eval", {"--checkpoint", "--eval-set"}},
      {"compare-regimes", {"--config", "--out"}},
      {"plan", {"--preset", "--stages", "--dp-ranks", "--phase"}},
  };
  for (const auto& [cmd, flags] : cases) {
    const Result r = run_cli(std::string(cmd) + " --help");
    CHECK(r.code == 0);
    for (const char* f : flags) {
      INFO(cmd << " " << f);
      CHECK(r.out.find(f) != std::string::npos);
    }
  }
}

TEST_CASE("plan") {
  const Result r = run_cli("plan --preset bloom-176b --dp-ranks 8");
  CHECK(r.code == 0);
  CHECK(r.out.find("176,247,271,424") != std::string::npos);
  CHECK(r.out.find("5.5P") != std::string::npos);
  const fs::path out = scratch() / "plan";
  const Result j = run_cli("plan --preset bloom-7b --stages 4 --dp-ranks 8 --json --out " + q(out));
  CHECK(j.code == 0);
  CHECK(json::parse(j.out)["parameters"].get<std::uint64_t>() == 7'069'016'064ULL);
  check_manifest(out / "manifest.json", "plan");
  CHECK(run_cli("plan --preset bloom-7b --stages 31").code == 2);
}

TEST_CASE("gen-data") {
  const fs::path a = scratch() / "gen/a.jsonl";
  const fs::path b = scratch() / "gen/b.jsonl";
  const std::string base = "gen-data --mode self-instruct --mock --seed 3 --count 20 "
                           "--malformed-rate 0.2 --seeds " + q(kFixtures / "seeds.jsonl");
  REQUIRE(run_cli(base + " --out " + q(a)).code == 0);
  REQUIRE(run_cli(base + " --out " + q(b)).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK_FALSE(slurp(a).empty());
  const json stats = json::parse(slurp(a.string() + ".stats.json"));
  CHECK(stats["emitted"].get<std::size_t>() + stats["parse_failures"].get<std::size_t>() +
            stats["dedup_removed"].get<std::size_t>() ==
        stats["generated"].get<std::size_t>());
  CHECK(stats["reconciles"] == true);
  check_manifest(a.string() + ".manifest.json", "gen-data");

  const fs::path qa = scratch() / "gen/qa.jsonl";
  const Result r = run_cli("gen-data --mode self-qa --mock --count 3 --source " +
                          q(kFixtures / "source.jsonl") + " --structured " +
                          q(kFixtures / "structured.jsonl") + " --out " + q(qa));
  CHECK(r.code == 0);
  const json qs = json::parse(slurp(qa.string() + ".stats.json"));
  CHECK(qs["generated"] == 12);
  CHECK(qs["reconciles"] == true);
  CHECK(slurp(qa).find("self_qa_structured") != std::string::npos);

  const Result empty = run_cli("gen-data --mock --seeds " + q(kFixtures / "empty.jsonl") +
                              " --out " + q(scratch() / "gen/e.jsonl"));
  CHECK(empty.code == 2);
  const Result bad = run_cli("gen-data --mock --seeds " + q(kFixtures / "bad_seeds.jsonl") +
                            " --out " + q(scratch() / "gen/x.jsonl"));
  CHECK(bad.code == 2);
  CHECK(bad.err.find("bad_seeds.jsonl:2") != std::string::npos);
  CHECK(run_cli("gen-data --seeds " + q(kFixtures / "seeds.jsonl") + " --out " +
               q(scratch() / "gen/n.jsonl")).code == 2);
}

TEST_CASE("mix") {
  const fs::path a = scratch() / "mix/a.jsonl";
  const fs::path b = scratch() / "mix/b.jsonl";
  const fs::path c = scratch() / "mix/c.jsonl";
  const std::string corpus = " --corpus " + q(kFixtures / "corpus");
  REQUIRE(run_cli("mix" + corpus + " --seed 5 --out " + q(a)).code == 0);
  REQUIRE(run_cli("mix" + corpus + " --seed 5 --out " + q(b)).code == 0);
  REQUIRE(run_cli("mix" + corpus + " --seed 5 --epoch 1 --out " + q(c)).code == 0);
  CHECK(hytune::checksum_file(a).fnv1a64 == hytune::checksum_file(b).fnv1a64);
  CHECK(slurp(a) != slurp(c));
  const json stats = json::parse(slurp(a.string() + ".stats.json"));
  CHECK(stats["total_documents"] == 7);
  check_manifest(a.string() + ".manifest.json", "mix");
  CHECK(run_cli("mix --corpus " + q(scratch() / "nowhere") + " --seed 1 --out " + q(a)).code == 2);
}

TEST_CASE("train, resume and eval") {
  const fs::path cfg = scratch() / "train.conf";
  write_config(cfg, "Seed = 4\nCorpus = " + (kFixtures / "corpus").string() + "\n");
  const fs::path full = scratch() / "train_full";
  const fs::path part = scratch() / "train_part";
  const fs::path resumed = scratch() / "train_resumed";

  const Result r = run_cli("train --config " + q(cfg) + " --out " + q(full));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("(done)") != std::string::npos);
  check_manifest(full / "manifest.json", "train");
  const json traj = json::parse(slurp(full / "trajectory.json"));
  REQUIRE(traj.size() >= 4);

  REQUIRE(run_cli("train --config " + q(cfg) + " --max-steps 3 --out " + q(part)).code == 0);
  CHECK(run_cli("train --config " + q(cfg) + " --resume " + q(part / "checkpoint.ckpt") +
               " --out " + q(resumed)).code == 0);
  CHECK(slurp(full / "checkpoint.ckpt") == slurp(resumed / "checkpoint.ckpt"));

  const Result e = run_cli("eval --checkpoint " + q(full / "checkpoint.ckpt") + " --eval-set " +
                          q(kFixtures / "eval.jsonl") + " --out " + q(scratch() / "eval"));
  CHECK(e.code == 0);
  CHECK(e.out.find("perplexity") != std::string::npos);
  check_manifest(scratch() / "eval/manifest.json", "eval");

  const fs::path bad = scratch() / "bad.conf";
  write_config(bad, "Seed = 4\nCorpus = " + (kFixtures / "corpus").string() + "\nColour = red\n");
  const Result v = run_cli("train --config " + q(bad) + " --out " + q(scratch() / "bad"));
  CHECK(v.code == 2);
  CHECK(v.err.find("Colour") != std::string::npos);
  CHECK(run_cli("eval --checkpoint " + q(kFixtures / "eval.jsonl") + " --eval-set " +
               q(kFixtures / "eval.jsonl")).code == 2);
  // An output path below a regular file fails at runtime.
  const Result w = run_cli("train --config " + q(cfg) + " --out " + q(cfg / "sub"));
  CHECK(w.code == 1);
}

TEST_CASE("checkpoint_every writes resumable snapshots") {
  const fs::path cfg = scratch() / "every.conf";
  write_config(cfg, "Seed = 4\nCheckpoint every = 2\nCorpus = " + (kFixtures / "corpus").string() + "\n");
  const fs::path out = scratch() / "every";
  REQUIRE(run_cli("train --config " + q(cfg) + " --out " + q(out)).code == 0);
  const fs::path plain_cfg = scratch() / "plain.conf";
  write_config(plain_cfg, "Seed = 4\nCorpus = " + (kFixtures / "corpus").string() + "\n");
  const fs::path plain = scratch() / "plain";
  REQUIRE(run_cli("train --config " + q(plain_cfg) + " --out " + q(plain)).code == 0);
  CHECK(slurp(out / "checkpoint.ckpt") == slurp(plain / "checkpoint.ckpt"));
}

TEST_CASE("compare-regimes") {
  const fs::path cfg = scratch() / "regimes.conf";
  write_config(cfg,
               "Seeds = 1\nSynthetic = True\nSynthetic pretrain docs = 10\n"
               "Synthetic instruction docs = 4\nSynthetic words per doc = 10\n",
               "600");
  const fs::path out = scratch() / "regimes";
  const Result r = run_cli("compare-regimes --config " + q(cfg) + " --out " + q(out));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("sequential") != std::string::npos);
  const json report = json::parse(slurp(out / "report.json"));
  CHECK(report["token_budget"] == 1200);
  check_manifest(out / "manifest.json", "compare-regimes");
}

#include "hytune/run_config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "hytune/errors.hpp"

namespace hytune {

namespace {

constexpr const char* kArch = "Architecture hyperparameters";
constexpr const char* kPre = "Pretraining hyperparameters";
constexpr const char* kFine = "Multitask finetuning hyperparameters";
constexpr const char* kRun = "Run";

struct Entry {
  std::string value;
  std::size_t line = 0;
};

using Section = std::map<std::string, Entry>;

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {kArch,
       {"Layers", "Hidden dim.", "Attention heads", "Vocab size", "Embedding rows",
        "Sequence length", "Precision", "Activation", "Position emb.", "Tied emb."}},
      {kPre,
       {"Global Batch Size", "Learning rate", "Total tokens", "Min. learning rate",
        "Warmup tokens", "Decay tokens", "Decay style", "Adam (beta1, beta2)", "Weight decay",
        "Gradient clipping"}},
      {kFine,
       {"Global Batch Size", "Learning rate", "Total tokens", "Min. learning rate",
        "Warmup tokens", "Decay tokens", "Decay style", "Weight decay"}},
      {kRun,
       {"Seed", "Seeds", "Phase", "Loss policy", "Corpus", "General corpus", "Financial corpus",
        "General eval", "Financial eval", "Synthetic", "Synthetic pretrain docs",
        "Synthetic instruction docs", "Synthetic words per doc", "Checkpoint every"}},
  };
  return s;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) {
    return "";
  }
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

class Fields {
 public:
  Fields(std::string source, std::map<std::string, Section> sections, std::filesystem::path base)
      : source_(std::move(source)), sections_(std::move(sections)), base_(std::move(base)) {}

  bool has_section(const char* section) const { return sections_.count(section) != 0; }

  bool has(const char* section, const char* key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) != 0;
  }

  const Entry& entry(const char* section, const char* key) const {
    if (!has(section, key)) {
      throw ValidationError(source_ + ": missing required field '" + key + "' in [" + section +
                            "]");
    }
    return sections_.at(section).at(key);
  }

  [[noreturn]] void fail(const char* section, const char* key, const std::string& why) const {
    const Entry& e = entry(section, key);
    throw ParseError(source_, e.line, "[" + std::string(section) + "] " + key + ": " + why);
  }

  std::uint64_t uint(const char* section, const char* key) const {
    const std::string& v = entry(section, key).value;
    // Accept integer notation and exact scientific notation such as 2e5.
    char* end = nullptr;
    errno = 0;
    if (v.find_first_of(".eE") == std::string::npos) {
      const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
      if (errno || end == v.c_str() || *end != '\0' || v[0] == '-') {
        fail(section, key, "expected a non-negative integer, got '" + v + "'");
      }
      return x;
    }
    const double d = std::strtod(v.c_str(), &end);
    if (errno || end == v.c_str() || *end != '\0' || d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
      fail(section, key, "expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::uint64_t>(d);
  }

  double real(const char* section, const char* key) const {
    return parse_real(section, key, entry(section, key).value);
  }

  double parse_real(const char* section, const char* key, const std::string& v) const {
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(v.c_str(), &end);
    if (errno || end == v.c_str() || *end != '\0') {
      fail(section, key, "expected a number, got '" + v + "'");
    }
    return d;
  }

  bool boolean(const char* section, const char* key) const {
    const std::string& v = entry(section, key).value;
    if (v == "True" || v == "true") return true;
    if (v == "False" || v == "false") return false;
    fail(section, key, "expected True or False, got '" + v + "'");
  }

  std::string text(const char* section, const char* key) const {
    return entry(section, key).value;
  }

  std::string choice(const char* section, const char* key,
                     std::initializer_list<const char*> options) const {
    const std::string& v = entry(section, key).value;
    std::string valid;
    for (const char* o : options) {
      if (v == o) {
        return v;
      }
      valid += (valid.empty() ? "" : ", ") + std::string(o);
    }
    fail(section, key, "expected one of " + valid + ", got '" + v + "'");
  }

  std::pair<double, double> pair(const char* section, const char* key) const {
    std::string v = entry(section, key).value;
    if (v.size() < 2 || v.front() != '(' || v.back() != ')') {
      fail(section, key, "expected '(a, b)', got '" + v + "'");
    }
    v = v.substr(1, v.size() - 2);
    const auto comma = v.find(',');
    if (comma == std::string::npos) {
      fail(section, key, "expected '(a, b)'");
    }
    return {parse_real(section, key, trim(v.substr(0, comma))),
            parse_real(section, key, trim(v.substr(comma + 1)))};
  }

  std::vector<std::uint64_t> uint_list(const char* section, const char* key) const {
    std::vector<std::uint64_t> out;
    std::stringstream ss(entry(section, key).value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      char* end = nullptr;
      errno = 0;
      const unsigned long long x = std::strtoull(item.c_str(), &end, 10);
      if (item.empty() || errno || *end != '\0' || item[0] == '-') {
        fail(section, key, "expected a comma-separated list of integers");
      }
      out.push_back(x);
    }
    return out;
  }

  std::filesystem::path path(const char* section, const char* key) const {
    std::filesystem::path p(entry(section, key).value);
    if (p.is_relative() && !base_.empty()) {
      p = base_ / p;
    }
    return p.lexically_normal();
  }

 private:
  std::string source_;
  std::map<std::string, Section> sections_;
  std::filesystem::path base_;
};

TrainingHyperparams read_block(const Fields& f, const char* section,
                               const TrainingHyperparams* inherit) {
  TrainingHyperparams t;
  if (inherit != nullptr) {
    t = *inherit;
  }
  t.global_batch = f.uint(section, "Global Batch Size");
  t.schedule.peak_lr = f.real(section, "Learning rate");
  t.total_tokens = f.uint(section, "Total tokens");
  t.schedule.warmup_tokens = static_cast<double>(f.uint(section, "Warmup tokens"));
  t.schedule.style = parse_decay_style(f.choice(section, "Decay style", {"cosine", "constant"}));
  t.weight_decay = f.real(section, "Weight decay");
  if (f.has(section, "Min. learning rate")) {
    t.schedule.min_lr = f.real(section, "Min. learning rate");
  } else if (t.schedule.style == DecayStyle::constant) {
    t.schedule.min_lr = t.schedule.peak_lr;
  } else {
    f.entry(section, "Min. learning rate");
  }
  if (f.has(section, "Decay tokens")) {
    t.schedule.decay_tokens = static_cast<double>(f.uint(section, "Decay tokens"));
  } else if (t.schedule.style == DecayStyle::constant) {
    t.schedule.decay_tokens = static_cast<double>(t.total_tokens);
  } else {
    f.entry(section, "Decay tokens");
  }
  if (inherit == nullptr) {
    const auto [b1, b2] = f.pair(section, "Adam (beta1, beta2)");
    t.beta1 = b1;
    t.beta2 = b2;
    t.grad_clip = f.real(section, "Gradient clipping");
  }
  try {
    t.validate();
  } catch (const ValidationError& e) {
    throw ValidationError("[" + std::string(section) + "] " + e.what());
  }
  return t;
}

std::string real_text(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

const TrainingHyperparams& RunConfig::phase_hyper() const {
  if (run.phase == "finetune") {
    if (!finetune) {
      throw ValidationError("phase finetune selected but the config has no [" +
                            std::string(kFine) + "] section");
    }
    return *finetune;
  }
  return pretrain;
}

RunConfig parse_run_config(const std::string& text, const std::string& source,
                           const std::filesystem::path& base_dir) {
  std::map<std::string, Section> sections;
  std::istringstream in(text);
  std::string raw;
  std::string current;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') {
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ParseError(source, line_no, "unterminated section header");
      }
      current = trim(line.substr(1, line.size() - 2));
      if (!schema().count(current)) {
        throw ParseError(source, line_no, "unknown section [" + current + "]");
      }
      if (sections.count(current)) {
        throw ParseError(source, line_no, "duplicate section [" + current + "]");
      }
      sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source, line_no, "expected 'key = value'");
    }
    if (current.empty()) {
      throw ParseError(source, line_no, "key outside of any section");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!schema().at(current).count(key)) {
      throw ParseError(source, line_no, "unknown key '" + key + "' in [" + current + "]");
    }
    if (sections[current].count(key)) {
      throw ParseError(source, line_no, "duplicate key '" + key + "'");
    }
    if (value.empty()) {
      throw ParseError(source, line_no, "empty value for '" + key + "'");
    }
    sections[current][key] = {value, line_no};
  }

  const Fields f(source, std::move(sections), base_dir);
  RunConfig c;
  c.model.layers = f.uint(kArch, "Layers");
  c.model.hidden_dim = f.uint(kArch, "Hidden dim.");
  c.model.attention_heads = f.uint(kArch, "Attention heads");
  c.model.vocab_size = f.has(kArch, "Vocab size") ? f.uint(kArch, "Vocab size") : kByteVocabSize;
  c.model.embedding_rows =
      f.has(kArch, "Embedding rows") ? f.uint(kArch, "Embedding rows") : c.model.vocab_size;
  c.model.seq_len = f.uint(kArch, "Sequence length");
  c.model.tied_embeddings = f.has(kArch, "Tied emb.") ? f.boolean(kArch, "Tied emb.") : true;
  if (f.has(kArch, "Activation")) {
    f.choice(kArch, "Activation", {"GELU"});
  }
  if (f.has(kArch, "Position emb.")) {
    f.choice(kArch, "Position emb.", {"Alibi"});
  }
  if (f.has(kArch, "Precision")) {
    f.choice(kArch, "Precision", {"float64"});
  }
  try {
    c.model.validate();
  } catch (const ValidationError& e) {
    throw ValidationError("[" + std::string(kArch) + "] " + e.what());
  }
  if (c.model.vocab_size < kByteVocabSize) {
    throw ValidationError("[" + std::string(kArch) + "] Vocab size must be at least " +
                          std::to_string(kByteVocabSize) + " for the byte tokenizer");
  }

  c.pretrain = read_block(f, kPre, nullptr);
  if (f.has_section(kFine)) {
    c.finetune = read_block(f, kFine, &c.pretrain);
  }

  if (f.has_section(kRun)) {
    RunSection& r = c.run;
    if (f.has(kRun, "Seed")) r.seed = f.uint(kRun, "Seed");
    if (f.has(kRun, "Seeds")) r.seeds = f.uint_list(kRun, "Seeds");
    if (f.has(kRun, "Phase")) r.phase = f.choice(kRun, "Phase", {"pretrain", "finetune"});
    if (f.has(kRun, "Loss policy")) {
      r.loss_policy = parse_loss_policy(f.choice(kRun, "Loss policy", {"full", "response_only"}));
    }
    if (f.has(kRun, "Corpus")) r.corpus = f.path(kRun, "Corpus");
    if (f.has(kRun, "General corpus")) r.general_corpus = f.path(kRun, "General corpus");
    if (f.has(kRun, "Financial corpus")) r.financial_corpus = f.path(kRun, "Financial corpus");
    if (f.has(kRun, "General eval")) r.general_eval = f.path(kRun, "General eval");
    if (f.has(kRun, "Financial eval")) r.financial_eval = f.path(kRun, "Financial eval");
    if (f.has(kRun, "Synthetic")) r.synthetic = f.boolean(kRun, "Synthetic");
    if (f.has(kRun, "Synthetic pretrain docs")) {
      r.synthetic_pretrain_docs = f.uint(kRun, "Synthetic pretrain docs");
    }
    if (f.has(kRun, "Synthetic instruction docs")) {
      r.synthetic_instruction_docs = f.uint(kRun, "Synthetic instruction docs");
    }
    if (f.has(kRun, "Synthetic words per doc")) {
      r.synthetic_words_per_doc = f.uint(kRun, "Synthetic words per doc");
    }
    if (f.has(kRun, "Checkpoint every")) r.checkpoint_every = f.uint(kRun, "Checkpoint every");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open config " + path.string());
  }
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.string(), path.parent_path());
}

std::string render_run_config(const RunConfig& c) {
  std::ostringstream out;
  out << '[' << kArch << "]\n";
  out << "Layers = " << c.model.layers << '\n';
  out << "Hidden dim. = " << c.model.hidden_dim << '\n';
  out << "Attention heads = " << c.model.attention_heads << '\n';
  out << "Vocab size = " << c.model.vocab_size << '\n';
  out << "Embedding rows = " << c.model.embedding_rows << '\n';
  out << "Sequence length = " << c.model.seq_len << '\n';
  out << "Precision = float64\nActivation = GELU\nPosition emb. = Alibi\n";
  out << "Tied emb. = " << (c.model.tied_embeddings ? "True" : "False") << "\n\n";

  auto block = [&](const char* name, const TrainingHyperparams& t, bool full) {
    out << '[' << name << "]\n";
    out << "Global Batch Size = " << t.global_batch << '\n';
    out << "Learning rate = " << real_text(t.schedule.peak_lr) << '\n';
    out << "Total tokens = " << t.total_tokens << '\n';
    out << "Min. learning rate = " << real_text(t.schedule.min_lr) << '\n';
    out << "Warmup tokens = " << static_cast<std::uint64_t>(t.schedule.warmup_tokens) << '\n';
    out << "Decay tokens = " << static_cast<std::uint64_t>(t.schedule.decay_tokens) << '\n';
    out << "Decay style = " << to_string(t.schedule.style) << '\n';
    if (full) {
      out << "Adam (beta1, beta2) = (" << real_text(t.beta1) << ", " << real_text(t.beta2)
          << ")\n";
    }
    out << "Weight decay = " << real_text(t.weight_decay) << '\n';
    if (full) {
      out << "Gradient clipping = " << real_text(t.grad_clip) << '\n';
    }
    out << '\n';
  };
  block(kPre, c.pretrain, true);
  if (c.finetune) {
    block(kFine, *c.finetune, false);
  }

  const RunSection& r = c.run;
  out << '[' << kRun << "]\n";
  out << "Seed = " << r.seed << '\n';
  if (!r.seeds.empty()) {
    out << "Seeds = ";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      out << (i ? ", " : "") << r.seeds[i];
    }
    out << '\n';
  }
  out << "Phase = " << r.phase << '\n';
  out << "Loss policy = " << to_string(r.loss_policy) << '\n';
  auto path = [&](const char* key, const std::optional<std::filesystem::path>& p) {
    if (p) {
      out << key << " = " << p->string() << '\n';
    }
  };
  path("Corpus", r.corpus);
  path("General corpus", r.general_corpus);
  path("Financial corpus", r.financial_corpus);
  path("General eval", r.general_eval);
  path("Financial eval", r.financial_eval);
  out << "Synthetic = " << (r.synthetic ? "True" : "False") << '\n';
  out << "Synthetic pretrain docs = " << r.synthetic_pretrain_docs << '\n';
  out << "Synthetic instruction docs = " << r.synthetic_instruction_docs << '\n';
  out << "Synthetic words per doc = " << r.synthetic_words_per_doc << '\n';
  out << "Checkpoint every = " << r.checkpoint_every << '\n';
  return out.str();
}

}  // namespace hytune

#include "hytune/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

#include <json.hpp>

#include "hytune/rng.hpp"

namespace hytune {

// ---------------------------------------------------------------------------
// Prompt templates (version kPromptTemplateVersion)

namespace {

constexpr const char* kSelfInstructHeader =
    "[self-instruct v1]\n"
    "Come up with new, diverse task instructions together with their answers.\n"
    "Here are some examples:\n\n";

constexpr const char* kSelfInstructFooter =
    "Write new tasks that differ from the examples. Use exactly this format: a line "
    "starting with \"Q: \" holding the task, then a line starting with \"A: \" holding the "
    "answer, and a blank line between tasks.\n";

constexpr const char* kSelfQaHeader =
    "[self-qa v1]\n"
    "Read the financial material below and write question-answer pairs that can be "
    "answered from it alone. Use exactly this format: a line starting with \"Q: \" holding "
    "the question, then a line starting with \"A: \" holding the answer, and a blank line "
    "between pairs.\n\n";

constexpr const char* kPairsLine = "Number of pairs: ";

}  // namespace

// ---------------------------------------------------------------------------
// Mock client

namespace {

constexpr const char* kMockVocabulary[] = {
    "asset",    "bond",      "yield",     "equity",   "dividend", "margin",    "revenue",
    "hedge",    "liquidity", "leverage",  "coupon",   "maturity", "portfolio", "risk",
    "inflation", "interest", "credit",    "default",  "spread",   "futures",   "option",
    "capital",  "earnings",  "valuation", "cashflow", "exchange", "currency",  "index",
    "market",   "broker",    "fund",      "treasury", "audit",    "balance",   "ledger",
    "tariff",   "subsidy",   "pension",   "annuity",  "premium",  "insurance", "mortgage",
    "loan",     "deposit",   "savings",   "volatility", "arbitrage", "commodity", "quarter",
    "forecast", "growth",    "deficit",   "surplus",  "budget",   "stock",     "share",
    "payout",   "profit",    "loss",      "rating"};

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (current.size() >= 3) {
      words.push_back(current);
    }
    current.clear();
  };
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
    }
  }
  flush();
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

std::size_t requested_pairs(std::string_view prompt) {
  const std::size_t pos = prompt.rfind(kPairsLine);
  if (pos == std::string_view::npos) {
    return 1;
  }
  std::size_t n = 0;
  for (std::size_t i = pos + std::string_view(kPairsLine).size();
       i < prompt.size() && std::isdigit(static_cast<unsigned char>(prompt[i])); ++i) {
    n = n * 10 + static_cast<std::size_t>(prompt[i] - '0');
  }
  return n;
}

std::string mock_phrase(Rng& rng, const std::vector<std::string>& words, std::size_t min_len,
                        std::size_t max_len) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) {
      out.push_back(' ');
    }
    out += words[rng.below(words.size())];
  }
  return out;
}

}  // namespace

MockCompletionClient::MockCompletionClient(MockOptions options) : options_(options) {}

std::string MockCompletionClient::complete(const CompletionRequest& request) {
  const std::size_t call = ++calls_;
  if (options_.fail_after_calls != 0 && call > options_.fail_after_calls) {
    throw CompletionError("mock: call budget of " + std::to_string(options_.fail_after_calls) +
                          " exhausted");
  }
  if (options_.transient_failures > 0) {
    std::lock_guard lock(mutex_);
    std::size_t& attempts = attempts_[request.prompt];
    if (attempts++ < options_.transient_failures) {
      throw CompletionError("mock: transient failure");
    }
  }

  std::vector<std::string> words = words_of(request.prompt);
  for (const char* w : kMockVocabulary) {
    words.emplace_back(w);
  }
  Rng rng(mix_seed(options_.seed, fnv1a(request.prompt)));
  const std::size_t n = requested_pairs(request.prompt);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) {
      out += "\n\n";
    }
    const std::string question = mock_phrase(rng, words, 5, 9);
    const std::string answer = mock_phrase(rng, words, 6, 12);
    if (rng.uniform() < options_.malformed_rate) {
      switch (rng.below(3)) {
        case 0: out += "Q: " + question + "?"; break;                   // missing answer
        case 1: out += "Question: " + question + "?\nA: " + answer; break;  // wrong prefix
        default: out += "Q: " + question + "?\nA: " + answer + "\nA: " + answer; break;
      }
    } else {
      out += "Q: " + question + "?\nA: " + answer + ".";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing and filtering

std::vector<QaBlock> parse_qa_blocks(std::string_view completion) {
  std::vector<std::vector<std::string>> blocks;
  std::vector<std::string> current;
  std::size_t start = 0;
  while (start <= completion.size()) {
    std::size_t end = completion.find('\n', start);
    if (end == std::string_view::npos) {
      end = completion.size();
    }
    std::string line(completion.substr(start, end - start));
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.find_first_not_of(" \t") == std::string::npos) {
      if (!current.empty()) {
        blocks.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(std::move(line));
    }
    start = end + 1;
  }
  if (!current.empty()) {
    blocks.push_back(std::move(current));
  }

  auto field = [](const std::string& line, const char* prefix) -> std::optional<std::string> {
    const std::string_view p(prefix);
    if (line.compare(0, p.size(), p) != 0) {
      return std::nullopt;
    }
    std::string value = line.substr(p.size());
    const auto first = value.find_first_not_of(" \t");
    if (first == std::string::npos) {
      return std::nullopt;
    }
    value.erase(0, first);
    value.erase(value.find_last_not_of(" \t") + 1);
    return value;
  };

  std::vector<QaBlock> out;
  for (const auto& lines : blocks) {
    if (lines.size() != 2) {
      out.emplace_back(std::nullopt);
      continue;
    }
    auto q = field(lines[0], "Q:");
    auto a = field(lines[1], "A:");
    if (q && a) {
      out.emplace_back(std::make_pair(std::move(*q), std::move(*a)));
    } else {
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

namespace {

/// Sorted, unique trigrams of an already normalized string. Strings shorter
/// than three bytes form a single gram.
std::vector<std::uint32_t> trigrams(const std::string& s) {
  std::vector<std::uint32_t> grams;
  auto byte = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])); };
  if (s.size() < 3) {
    std::uint32_t g = 0xff000000u | static_cast<std::uint32_t>(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      g ^= byte(i) << (8 * (i + 1));
    }
    grams.push_back(g);
    return grams;
  }
  for (std::size_t i = 0; i + 2 < s.size(); ++i) {
    grams.push_back((byte(i) << 16) | (byte(i + 1) << 8) | byte(i + 2));
  }
  std::sort(grams.begin(), grams.end());
  grams.erase(std::unique(grams.begin(), grams.end()), grams.end());
  return grams;
}

double jaccard(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::size_t common = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++common;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - common;
  return uni == 0 ? 1.0 : static_cast<double>(common) / static_cast<double>(uni);
}

/// Survivor set used by the dedup filter and the generators.
class NearDuplicateIndex {
 public:
  explicit NearDuplicateIndex(double threshold) : threshold_(threshold) {}

  /// Adds text unless it duplicates an entry; returns whether it was added.
  bool insert(std::string_view text) {
    std::string norm = normalize_text(text);
    std::vector<std::uint32_t> grams = trigrams(norm);
    for (std::size_t i = 0; i < texts_.size(); ++i) {
      if (texts_[i] == norm || jaccard(grams_[i], grams) > threshold_) {
        return false;
      }
    }
    texts_.push_back(std::move(norm));
    grams_.push_back(std::move(grams));
    return true;
  }

 private:
  double threshold_;
  std::vector<std::string> texts_;
  std::vector<std::vector<std::uint32_t>> grams_;
};

}  // namespace

double trigram_jaccard(std::string_view a, std::string_view b) {
  return jaccard(trigrams(normalize_text(a)), trigrams(normalize_text(b)));
}

std::vector<InstructionRecord> dedup_filter(std::span<const InstructionRecord> records,
                                            double threshold, std::size_t* removed) {
  NearDuplicateIndex index(threshold);
  std::vector<InstructionRecord> out;
  for (const InstructionRecord& rec : records) {
    if (index.insert(rec.instruction)) {
      out.push_back(rec);
    }
  }
  if (removed != nullptr) {
    *removed = records.size() - out.size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Request execution

namespace {

struct Outcome {
  std::optional<std::string> completion;
  std::string error;
};

Outcome call_with_retries(CompletionClient& client, const CompletionRequest& request,
                          std::size_t retry_budget) {
  Outcome outcome;
  for (std::size_t attempt = 0; attempt <= retry_budget; ++attempt) {
    try {
      outcome.completion = client.complete(request);
      return outcome;
    } catch (const std::exception& e) {
      outcome.error = e.what();
    }
  }
  return outcome;
}

/// Issues the requests at most max_in_flight at a time; outcomes come back
/// in request order.
std::vector<Outcome> run_requests(CompletionClient& client,
                                  const std::vector<CompletionRequest>& requests,
                                  const GenerationOptions& options) {
  std::vector<Outcome> outcomes;
  const std::size_t width = std::max<std::size_t>(1, options.max_in_flight);
  for (std::size_t start = 0; start < requests.size(); start += width) {
    const std::size_t end = std::min(requests.size(), start + width);
    if (end - start == 1) {
      outcomes.push_back(call_with_retries(client, requests[start], options.retry_budget));
      continue;
    }
    std::vector<std::future<Outcome>> inflight;
    for (std::size_t i = start; i < end; ++i) {
      inflight.push_back(std::async(std::launch::async, [&client, &requests, &options, i] {
        return call_with_retries(client, requests[i], options.retry_budget);
      }));
    }
    for (auto& f : inflight) {
      outcomes.push_back(f.get());
    }
  }
  return outcomes;
}

std::string format_example(const InstructionRecord& rec) {
  std::string q = rec.instruction;
  if (rec.input && !rec.input->empty()) {
    q += " " + *rec.input;
  }
  std::replace(q.begin(), q.end(), '\n', ' ');
  std::string a = rec.output;
  std::replace(a.begin(), a.end(), '\n', ' ');
  return "Q: " + q + "\nA: " + a + "\n\n";
}

std::string self_instruct_prompt(std::span<const InstructionRecord> seeds, std::size_t request,
                                 std::uint64_t seed, const GenerationOptions& options) {
  std::vector<std::size_t> order(seeds.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  Rng rng(mix_seed(seed, request));
  const std::size_t shots = std::min(options.few_shot, seeds.size());
  for (std::size_t i = 0; i < shots; ++i) {
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
  }
  std::string prompt = kSelfInstructHeader;
  for (std::size_t i = 0; i < shots; ++i) {
    prompt += format_example(seeds[order[i]]);
  }
  prompt += kSelfInstructFooter;
  prompt += "Request: " + std::to_string(request) + "\n";
  prompt += kPairsLine + std::to_string(options.pairs_per_request) + "\n";
  return prompt;
}

GenerationResult self_qa(const std::string& material, const std::string& provenance,
                         InstructionSource source, CompletionClient& client, std::size_t n_pairs,
                         const GenerationOptions& options) {
  GenerationResult result;
  if (n_pairs == 0) {
    return result;
  }
  const std::size_t per = std::max<std::size_t>(1, options.pairs_per_request);
  std::vector<CompletionRequest> requests;
  std::vector<std::size_t> slots;
  for (std::size_t left = n_pairs, part = 0; left > 0; ++part) {
    const std::size_t n = std::min(per, left);
    std::string prompt = kSelfQaHeader;
    prompt += material;
    if (!prompt.empty() && prompt.back() != '\n') {
      prompt.push_back('\n');
    }
    prompt += "\nPart: " + std::to_string(part) + "\n";
    prompt += kPairsLine + std::to_string(n) + "\n";
    requests.push_back({std::move(prompt), options.max_length});
    slots.push_back(n);
    left -= n;
  }

  const std::vector<Outcome> outcomes = run_requests(client, requests, options);
  NearDuplicateIndex index(options.dedup_threshold);
  for (std::size_t r = 0; r < outcomes.size(); ++r) {
    result.stats.requests += 1;
    if (!outcomes[r].completion) {
      result.stats.failed_requests += 1;
      result.stats.errors.push_back("request " + std::to_string(r) + ": " + outcomes[r].error);
      break;
    }
    const std::vector<QaBlock> blocks = parse_qa_blocks(*outcomes[r].completion);
    for (std::size_t i = 0; i < slots[r]; ++i) {
      result.stats.generated += 1;
      if (i >= blocks.size() || !blocks[i]) {
        result.stats.parse_failures += 1;
        continue;
      }
      if (!index.insert(blocks[i]->first)) {
        result.stats.dedup_removed += 1;
        continue;
      }
      InstructionRecord rec;
      rec.instruction = blocks[i]->first;
      rec.output = blocks[i]->second;
      rec.source = source;
      rec.provenance = provenance;
      rec.validate();
      result.records.push_back(std::move(rec));
      result.stats.emitted += 1;
    }
  }
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Generators

std::size_t self_instruct_call_budget(std::size_t target_count, const GenerationOptions& options) {
  const std::size_t per = std::max<std::size_t>(1, options.pairs_per_request);
  const std::size_t requests = options.overgeneration * ((target_count + per - 1) / per);
  return requests * (options.retry_budget + 1);
}

GenerationResult self_instruct_expand(std::span<const InstructionRecord> seeds,
                                      CompletionClient& client, std::size_t target_count,
                                      std::uint64_t seed, const GenerationOptions& options) {
  if (seeds.empty()) {
    throw ValidationError("self_instruct_expand: no seed instructions");
  }
  for (const InstructionRecord& s : seeds) {
    s.validate();
  }
  GenerationResult result;
  if (target_count == 0) {
    return result;
  }
  const std::size_t per = std::max<std::size_t>(1, options.pairs_per_request);
  const std::size_t max_requests = options.overgeneration * ((target_count + per - 1) / per);
  const std::size_t width = std::max<std::size_t>(1, options.max_in_flight);

  NearDuplicateIndex index(options.dedup_threshold);
  for (const InstructionRecord& s : seeds) {
    index.insert(s.instruction);
  }

  std::size_t next_request = 0;
  bool stop = false;
  while (!stop && result.stats.emitted < target_count && next_request < max_requests) {
    std::vector<CompletionRequest> wave;
    const std::size_t first = next_request;
    for (; next_request < max_requests && next_request - first < width; ++next_request) {
      wave.push_back({self_instruct_prompt(seeds, next_request, seed, options), options.max_length});
    }
    const std::vector<Outcome> outcomes = run_requests(client, wave, options);
    for (std::size_t r = 0; r < outcomes.size() && !stop; ++r) {
      result.stats.requests += 1;
      if (!outcomes[r].completion) {
        result.stats.failed_requests += 1;
        result.stats.errors.push_back("request " + std::to_string(first + r) + ": " +
                                      outcomes[r].error);
        stop = true;
        break;
      }
      for (const QaBlock& block : parse_qa_blocks(*outcomes[r].completion)) {
        if (result.stats.emitted == target_count) {
          stop = true;
          break;
        }
        result.stats.generated += 1;
        if (!block) {
          result.stats.parse_failures += 1;
          continue;
        }
        if (!index.insert(block->first)) {
          result.stats.dedup_removed += 1;
          continue;
        }
        InstructionRecord rec;
        rec.instruction = block->first;
        rec.output = block->second;
        rec.source = InstructionSource::self_instruct;
        rec.validate();
        result.records.push_back(std::move(rec));
        result.stats.emitted += 1;
      }
    }
  }
  if (result.stats.emitted < target_count && result.stats.failed_requests == 0) {
    result.stats.errors.push_back("request budget of " + std::to_string(max_requests) +
                                  " exhausted with " + std::to_string(result.stats.emitted) +
                                  " of " + std::to_string(target_count) + " records");
  }
  return result;
}

GenerationResult self_qa_unstructured(const Document& doc, CompletionClient& client,
                                      std::size_t n_pairs, const GenerationOptions& options) {
  doc.validate();
  if (doc.kind != Kind::pretrain) {
    throw ValidationError("self_qa_unstructured: document " + doc.id +
                          " is not an unstructured (pretrain) document");
  }
  return self_qa("Text:\n" + doc.text, doc.id, InstructionSource::self_qa_unstructured, client,
                 n_pairs, options);
}

GenerationResult self_qa_structured(const StructuredRecord& record, CompletionClient& client,
                                    std::size_t n_pairs, const GenerationOptions& options) {
  const std::string table = serialize_structured(record);
  return self_qa("Record:\n" + table, record.entity, InstructionSource::self_qa_structured, client,
                 n_pairs, options);
}

std::string serialize_structured(const StructuredRecord& record) {
  if (record.fields.empty()) {
    throw ValidationError("structured record '" + record.entity + "' has no fields");
  }
  std::ostringstream out;
  out << "entity: " << record.entity << '\n';
  out << "| field | value |\n";
  for (const auto& [key, value] : record.fields) {
    out << "| " << key << " | ";
    std::visit(
        [&out](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, bool>) {
            out << (v ? "true" : "false");
          } else if constexpr (std::is_same_v<V, double>) {
            out << nlohmann::json(v).dump();
          } else {
            out << v;
          }
        },
        value);
    out << " |\n";
  }
  return out.str();
}

StructuredRecord parse_structured_line(std::string_view line, const std::string& source,
                                       std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("entity") || !j["entity"].is_string()) {
    throw ParseError(source, line_no, "expected an object with a string 'entity'");
  }
  if (!j.contains("fields") || !j["fields"].is_object() || j["fields"].empty()) {
    throw ParseError(source, line_no, "expected a non-empty object 'fields'");
  }
  StructuredRecord rec;
  rec.entity = j["entity"].get<std::string>();
  for (const auto& [key, value] : j["fields"].items()) {
    if (value.is_string()) {
      rec.fields[key] = value.get<std::string>();
    } else if (value.is_boolean()) {
      rec.fields[key] = value.get<bool>();
    } else if (value.is_number_integer()) {
      rec.fields[key] = value.get<std::int64_t>();
    } else if (value.is_number()) {
      rec.fields[key] = value.get<double>();
    } else {
      throw ParseError(source, line_no, "field '" + key + "' must be a string, number or bool");
    }
  }
  return rec;
}

std::vector<StructuredRecord> read_structured(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open " + path.string());
  }
  std::vector<StructuredRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    out.push_back(parse_structured_line(line, path.string(), line_no));
  }
  return out;
}

}  // namespace hytune

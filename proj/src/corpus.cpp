#include "hytune/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <unordered_set>

#include <json.hpp>

#include "hytune/errors.hpp"
#include "hytune/rng.hpp"

namespace hytune {

using nlohmann::json;

std::string to_string(Domain d) { return d == Domain::general ? "general" : "financial"; }
std::string to_string(Kind k) { return k == Kind::pretrain ? "pretrain" : "instruction"; }

std::string to_string(Stream s) {
  switch (s) {
    case Stream::general_pretrain: return "general_pretrain";
    case Stream::financial_pretrain: return "financial_pretrain";
    case Stream::general_instruction: return "general_instruction";
    case Stream::financial_instruction: return "financial_instruction";
  }
  return "unknown";
}

std::string to_string(InstructionSource s) {
  switch (s) {
    case InstructionSource::seed: return "seed";
    case InstructionSource::self_instruct: return "self_instruct";
    case InstructionSource::self_qa_unstructured: return "self_qa_unstructured";
    case InstructionSource::self_qa_structured: return "self_qa_structured";
  }
  return "unknown";
}

Domain parse_domain(const std::string& text) {
  if (text == "general") return Domain::general;
  if (text == "financial") return Domain::financial;
  throw ValidationError("unknown domain '" + text + "' (expected general or financial)");
}

Kind parse_kind(const std::string& text) {
  if (text == "pretrain") return Kind::pretrain;
  if (text == "instruction") return Kind::instruction;
  throw ValidationError("unknown kind '" + text + "' (expected pretrain or instruction)");
}

InstructionSource parse_source(const std::string& text) {
  for (auto s : {InstructionSource::seed, InstructionSource::self_instruct,
                 InstructionSource::self_qa_unstructured, InstructionSource::self_qa_structured}) {
    if (to_string(s) == text) {
      return s;
    }
  }
  throw ValidationError("unknown instruction source '" + text + "'");
}

Stream stream_of(Domain domain, Kind kind) {
  if (kind == Kind::pretrain) {
    return domain == Domain::general ? Stream::general_pretrain : Stream::financial_pretrain;
  }
  return domain == Domain::general ? Stream::general_instruction : Stream::financial_instruction;
}

void InstructionRecord::validate() const {
  if (instruction.empty()) {
    throw ValidationError("instruction record: empty instruction");
  }
  if (output.empty()) {
    throw ValidationError("instruction record: empty output");
  }
}

void Document::validate() const {
  if (id.empty()) {
    throw ValidationError("document: empty id");
  }
  if (text.empty()) {
    throw ValidationError("document " + id + ": empty text");
  }
  if (kind == Kind::instruction) {
    if (!record) {
      throw ValidationError("document " + id + ": instruction document without a record");
    }
    record->validate();
  } else if (record) {
    throw ValidationError("document " + id + ": pretrain document carries an instruction record");
  }
}

Document instruction_document(std::string id, Domain domain, InstructionRecord record) {
  Document doc;
  doc.id = std::move(id);
  doc.domain = domain;
  doc.kind = Kind::instruction;
  doc.text = "Human: " + record.instruction + "\n";
  if (record.input && !record.input->empty()) {
    doc.text += *record.input + "\n";
  }
  doc.text += record.output;
  doc.record = std::move(record);
  return doc;
}

// ---------------------------------------------------------------------------

TokenSequence tokenize(std::string_view text) {
  TokenSequence tokens;
  tokens.reserve(text.size());
  for (unsigned char c : text) {
    tokens.push_back(c);
  }
  return tokens;
}

std::string detokenize(std::span<const Token> tokens) {
  std::string text;
  text.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 256) {
      text.push_back(static_cast<char>(t));
    } else if (t >= kByteVocabSize) {
      throw ValidationError("detokenize: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  return text;
}

FormattedInstruction format_instruction(const InstructionRecord& record) {
  record.validate();
  std::string prompt = "Human: " + record.instruction + "\n";
  if (record.input && !record.input->empty()) {
    prompt += *record.input + "\n";
  }
  FormattedInstruction f;
  f.tokens = tokenize(prompt);
  f.tokens.push_back(kResp);
  f.response_start = f.tokens.size();
  const TokenSequence out = tokenize(record.output);
  f.tokens.insert(f.tokens.end(), out.begin(), out.end());
  return f;
}

std::size_t document_tokens(const Document& doc) {
  if (doc.kind == Kind::instruction) {
    return format_instruction(*doc.record).tokens.size();
  }
  return doc.text.size();
}

// ---------------------------------------------------------------------------

MixturePlan make_plan(std::span<const Document> docs, std::uint64_t seed, std::uint64_t epoch) {
  MixturePlan plan;
  plan.seed = seed;
  plan.epoch = epoch;
  for (const Document& doc : docs) {
    plan.streams[static_cast<std::size_t>(doc.stream())].push_back(doc);
  }
  return plan;
}

std::vector<Document> hybrid_shuffle(const MixturePlan& plan) {
  std::vector<Document> pool;
  std::unordered_set<std::string> seen;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    for (const Document& doc : plan.streams[s]) {
      if (static_cast<std::size_t>(doc.stream()) != s) {
        throw ValidationError("hybrid_shuffle: document " + doc.id + " placed in stream " +
                              to_string(static_cast<Stream>(s)) + " but tagged " +
                              to_string(doc.stream()));
      }
      if (!seen.insert(doc.id).second) {
        throw ValidationError("hybrid_shuffle: duplicate document id '" + doc.id + "'");
      }
    }
  }
  if (seen.empty()) {
    throw ValidationError("hybrid_shuffle: all streams are empty");
  }
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    for (std::size_t r = 0; r < plan.repetition[s]; ++r) {
      pool.insert(pool.end(), plan.streams[s].begin(), plan.streams[s].end());
    }
  }
  Rng rng(mix_seed(plan.seed, plan.epoch));
  for (std::size_t i = pool.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(pool[i - 1], pool[j]);
  }
  return pool;
}

MixtureStats mixture_stats(std::span<const Document> docs) {
  MixtureStats stats;
  for (const Document& doc : docs) {
    const auto s = static_cast<std::size_t>(doc.stream());
    const std::size_t n = document_tokens(doc);
    stats.documents[s] += 1;
    stats.tokens[s] += n;
    stats.total_documents += 1;
    stats.total_tokens += n;
  }
  if (stats.total_tokens > 0) {
    for (std::size_t s = 0; s < kStreamCount; ++s) {
      stats.token_share[s] =
          static_cast<double>(stats.tokens[s]) / static_cast<double>(stats.total_tokens);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------

std::string to_string(LossPolicy p) { return p == LossPolicy::full ? "full" : "response_only"; }

LossPolicy parse_loss_policy(const std::string& text) {
  if (text == "full") return LossPolicy::full;
  if (text == "response_only") return LossPolicy::response_only;
  throw ValidationError("unknown loss policy '" + text + "' (expected full or response_only)");
}

namespace {

struct Unit {
  TokenSequence tokens;
  std::vector<std::uint8_t> mask;
};

Unit make_unit(const Document& doc, LossPolicy policy) {
  Unit unit;
  if (doc.kind == Kind::pretrain) {
    unit.tokens = tokenize(doc.text);
    unit.tokens.push_back(kDocSep);
    unit.mask.assign(unit.tokens.size(), 1);
    return unit;
  }
  const FormattedInstruction f = format_instruction(*doc.record);
  unit.tokens = f.tokens;
  unit.tokens.push_back(kDocSep);
  unit.mask.assign(unit.tokens.size(), 1);
  if (policy == LossPolicy::response_only) {
    std::fill(unit.mask.begin(), unit.mask.begin() + static_cast<std::ptrdiff_t>(f.response_start),
              0);
  }
  return unit;
}

class SequenceWriter {
 public:
  explicit SequenceWriter(std::size_t seq_len) : seq_len_(seq_len) {}

  std::size_t space() const { return seq_len_ - current_.tokens.size(); }
  bool empty() const { return current_.tokens.empty(); }

  /// Appends tokens [from, from+n) of unit, recording a segment.
  void append(const std::string& id, const Unit& unit, std::size_t from, std::size_t n) {
    current_.segments.push_back({id, current_.tokens.size(), n});
    current_.tokens.insert(current_.tokens.end(), unit.tokens.begin() + static_cast<std::ptrdiff_t>(from),
                           unit.tokens.begin() + static_cast<std::ptrdiff_t>(from + n));
    current_.mask.insert(current_.mask.end(), unit.mask.begin() + static_cast<std::ptrdiff_t>(from),
                         unit.mask.begin() + static_cast<std::ptrdiff_t>(from + n));
    if (space() == 0) {
      flush();
    }
  }

  void flush() {
    if (current_.tokens.empty()) {
      return;
    }
    current_.tokens.resize(seq_len_, kPad);
    current_.mask.resize(seq_len_, 0);
    out_.push_back(std::move(current_));
    current_ = {};
  }

  std::vector<PackedSequence> take() {
    flush();
    return std::move(out_);
  }

 private:
  std::size_t seq_len_;
  PackedSequence current_;
  std::vector<PackedSequence> out_;
};

}  // namespace

std::size_t masked_contribution(const Document& doc, LossPolicy policy) {
  if (doc.kind == Kind::pretrain) {
    return doc.text.size() + 1;
  }
  const FormattedInstruction f = format_instruction(*doc.record);
  return policy == LossPolicy::full ? f.tokens.size() + 1
                                    : f.tokens.size() - f.response_start + 1;
}

PackResult pack(std::span<const Document> docs, std::size_t seq_len, LossPolicy policy) {
  if (seq_len < 2) {
    throw ValidationError("pack: seq_len must be at least 2");
  }
  PackResult result;
  SequenceWriter writer(seq_len);
  for (const Document& doc : docs) {
    doc.validate();
    const Unit unit = make_unit(doc, policy);
    if (doc.kind == Kind::pretrain) {
      std::size_t written = 0;
      while (written < unit.tokens.size()) {
        const std::size_t n = std::min(writer.space(), unit.tokens.size() - written);
        writer.append(doc.id, unit, written, n);
        written += n;
      }
      continue;
    }
    if (unit.tokens.size() > seq_len) {
      result.dropped_instructions += 1;
      continue;
    }
    if (unit.tokens.size() > writer.space()) {
      writer.flush();
    }
    writer.append(doc.id, unit, 0, unit.tokens.size());
  }
  result.sequences = writer.take();
  return result;
}

std::vector<PackedBatch> make_batches(std::span<const PackedSequence> sequences,
                                      std::size_t batch_size) {
  if (batch_size == 0) {
    throw ValidationError("make_batches: batch size must be at least 1");
  }
  std::vector<PackedBatch> batches;
  for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, sequences.size() - start);
    PackedBatch b;
    b.batch = n;
    b.seq_len = sequences[start].tokens.size();
    for (std::size_t i = 0; i < n; ++i) {
      const PackedSequence& s = sequences[start + i];
      b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
      b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
      b.provenance.push_back(s.segments);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// JSON-lines

namespace {

json parse_json_object(std::string_view line, const std::string& source, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) {
    throw ParseError(source, line_no, "expected a JSON object");
  }
  return j;
}

std::string required_string(const json& j, const char* key, const std::string& source,
                            std::size_t line_no) {
  if (!j.contains(key)) {
    throw ParseError(source, line_no, std::string("missing field '") + key + "'");
  }
  if (!j[key].is_string()) {
    throw ParseError(source, line_no, std::string("field '") + key + "' must be a string");
  }
  return j[key].get<std::string>();
}

std::optional<std::string> optional_string(const json& j, const char* key,
                                           const std::string& source, std::size_t line_no) {
  if (!j.contains(key) || j[key].is_null()) {
    return std::nullopt;
  }
  if (!j[key].is_string()) {
    throw ParseError(source, line_no, std::string("field '") + key + "' must be a string");
  }
  return j[key].get<std::string>();
}

InstructionRecord record_from_json(const json& j, const std::string& source, std::size_t line_no) {
  InstructionRecord rec;
  rec.instruction = required_string(j, "instruction", source, line_no);
  rec.input = optional_string(j, "input", source, line_no);
  rec.output = required_string(j, "output", source, line_no);
  rec.provenance = optional_string(j, "provenance", source, line_no);
  try {
    if (auto s = optional_string(j, "source", source, line_no)) {
      rec.source = parse_source(*s);
    }
    rec.validate();
  } catch (const ParseError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ParseError(source, line_no, e.what());
  }
  return rec;
}

void record_to_json(const InstructionRecord& rec, json& j) {
  j["instruction"] = rec.instruction;
  if (rec.input) {
    j["input"] = *rec.input;
  }
  j["output"] = rec.output;
  j["source"] = to_string(rec.source);
  if (rec.provenance) {
    j["provenance"] = *rec.provenance;
  }
}

template <typename T, typename ParseLine>
std::vector<T> read_lines(const std::filesystem::path& path, ParseLine parse_line) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open " + path.string());
  }
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    out.push_back(parse_line(line, path.string(), line_no));
  }
  return out;
}

}  // namespace

Document parse_document_line(std::string_view line, const std::string& source,
                             std::size_t line_no) {
  const json j = parse_json_object(line, source, line_no);
  Document doc;
  doc.id = required_string(j, "id", source, line_no);
  try {
    doc.domain = parse_domain(required_string(j, "domain", source, line_no));
    doc.kind = parse_kind(required_string(j, "kind", source, line_no));
  } catch (const ParseError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ParseError(source, line_no, e.what());
  }
  if (doc.kind == Kind::instruction) {
    doc = instruction_document(doc.id, doc.domain, record_from_json(j, source, line_no));
    if (auto text = optional_string(j, "text", source, line_no)) {
      doc.text = *text;
    }
  } else {
    doc.text = required_string(j, "text", source, line_no);
  }
  try {
    doc.validate();
  } catch (const ValidationError& e) {
    throw ParseError(source, line_no, e.what());
  }
  return doc;
}

InstructionRecord parse_instruction_line(std::string_view line, const std::string& source,
                                         std::size_t line_no) {
  return record_from_json(parse_json_object(line, source, line_no), source, line_no);
}

std::string document_to_json(const Document& doc) {
  json j;
  j["id"] = doc.id;
  j["text"] = doc.text;
  j["domain"] = to_string(doc.domain);
  j["kind"] = to_string(doc.kind);
  if (doc.record) {
    record_to_json(*doc.record, j);
  }
  return j.dump();
}

std::string instruction_to_json(const InstructionRecord& rec) {
  json j;
  record_to_json(rec, j);
  return j.dump();
}

std::vector<Document> read_documents(const std::filesystem::path& path) {
  return read_lines<Document>(path, parse_document_line);
}

std::vector<InstructionRecord> read_instructions(const std::filesystem::path& path) {
  return read_lines<InstructionRecord>(path, parse_instruction_line);
}

std::vector<Document> read_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("corpus directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  std::unordered_set<std::string> ids;
  for (const auto& file : files) {
    for (Document& doc : read_documents(file)) {
      if (!ids.insert(doc.id).second) {
        throw ValidationError(file.string() + ": duplicate document id '" + doc.id + "'");
      }
      docs.push_back(std::move(doc));
    }
  }
  return docs;
}

void write_documents(std::ostream& out, std::span<const Document> docs) {
  for (const Document& doc : docs) {
    out << document_to_json(doc) << '\n';
  }
}

void write_instructions(std::ostream& out, std::span<const InstructionRecord> records) {
  for (const InstructionRecord& rec : records) {
    out << instruction_to_json(rec) << '\n';
  }
}

}  // namespace hytune

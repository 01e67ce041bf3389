#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hytune/token.hpp"

namespace hytune {

// ---------------------------------------------------------------------------
// Records

enum class Domain { general, financial };
enum class Kind { pretrain, instruction };

/// The four hybrid-tuning streams, in canonical order.
enum class Stream : std::size_t {
  general_pretrain = 0,
  financial_pretrain = 1,
  general_instruction = 2,
  financial_instruction = 3,
};
inline constexpr std::size_t kStreamCount = 4;

enum class InstructionSource { seed, self_instruct, self_qa_unstructured, self_qa_structured };

std::string to_string(Domain d);
std::string to_string(Kind k);
std::string to_string(Stream s);
std::string to_string(InstructionSource s);
Domain parse_domain(const std::string& text);
Kind parse_kind(const std::string& text);
InstructionSource parse_source(const std::string& text);

Stream stream_of(Domain domain, Kind kind);

struct InstructionRecord {
  std::string instruction;
  std::optional<std::string> input;
  std::string output;
  InstructionSource source = InstructionSource::seed;
  /// Id of the document or entity a generated record was derived from.
  std::optional<std::string> provenance;

  void validate() const;
  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

struct Document {
  std::string id;
  std::string text;
  Domain domain = Domain::general;
  Kind kind = Kind::pretrain;
  /// Present exactly when kind == instruction.
  std::optional<InstructionRecord> record;

  Stream stream() const { return stream_of(domain, kind); }
  void validate() const;
  friend bool operator==(const Document&, const Document&) = default;
};

/// Instruction document whose text is the plain rendering of the record.
Document instruction_document(std::string id, Domain domain, InstructionRecord record);

// ---------------------------------------------------------------------------
// Byte-level tokenizer

inline constexpr Token kPad = 256;
inline constexpr Token kDocSep = 257;
inline constexpr Token kResp = 258;
inline constexpr std::size_t kByteVocabSize = 259;

TokenSequence tokenize(std::string_view text);
std::string detokenize(std::span<const Token> tokens);

struct FormattedInstruction {
  TokenSequence tokens;
  /// Index of the first output token; tokens[response_start - 1] == kResp.
  std::size_t response_start = 0;
};

/// "Human: {instruction}\n" [+ "{input}\n"] then RESP then the output bytes.
FormattedInstruction format_instruction(const InstructionRecord& record);

/// Tokens a document contributes before separators: bytes of the text for
/// pretrain documents, the formatted record for instruction documents.
std::size_t document_tokens(const Document& doc);

// ---------------------------------------------------------------------------
// Hybrid-tuning mixer

struct MixturePlan {
  std::array<std::vector<Document>, kStreamCount> streams;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  /// Copies of each stream placed in the pool before shuffling.
  std::array<std::size_t, kStreamCount> repetition{1, 1, 1, 1};
};

/// Splits documents into their streams, preserving order.
MixturePlan make_plan(std::span<const Document> docs, std::uint64_t seed, std::uint64_t epoch = 0);

/// Pools all streams (stream order, then document order, repeated per the
/// repetition factors) and applies a Fisher-Yates shuffle driven by mt19937_64
/// seeded with mix_seed(seed, epoch).
std::vector<Document> hybrid_shuffle(const MixturePlan& plan);

struct MixtureStats {
  std::array<std::size_t, kStreamCount> documents{};
  std::array<std::size_t, kStreamCount> tokens{};
  std::array<double, kStreamCount> token_share{};
  std::size_t total_documents = 0;
  std::size_t total_tokens = 0;
};

MixtureStats mixture_stats(std::span<const Document> docs);

// ---------------------------------------------------------------------------
// Packing

enum class LossPolicy { full, response_only };

std::string to_string(LossPolicy p);
LossPolicy parse_loss_policy(const std::string& text);

struct Segment {
  std::string doc_id;
  std::size_t offset = 0;  // position within the sequence
  std::size_t length = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct PackedSequence {
  TokenSequence tokens;
  std::vector<std::uint8_t> mask;
  std::vector<Segment> segments;
  friend bool operator==(const PackedSequence&, const PackedSequence&) = default;
};

struct PackResult {
  std::vector<PackedSequence> sequences;
  std::size_t dropped_instructions = 0;
};

/// Pretrain documents are written as text + DOC_SEP and may span sequences.
/// Instruction samples (formatted record + DOC_SEP) are kept whole: a sample
/// longer than seq_len is dropped, one that does not fit the remaining space
/// starts a new sequence. Partial sequences are PAD-filled with mask 0.
PackResult pack(std::span<const Document> docs, std::size_t seq_len, LossPolicy policy);

/// Mask-1 positions a document yields when packed (including its separator).
std::size_t masked_contribution(const Document& doc, LossPolicy policy);

struct PackedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<Token> tokens;         // [batch * seq_len]
  std::vector<std::uint8_t> mask;    // [batch * seq_len]
  std::vector<std::vector<Segment>> provenance;  // per row

  std::span<const Token> row_tokens(std::size_t r) const {
    return std::span<const Token>(tokens).subspan(r * seq_len, seq_len);
  }
  std::span<const std::uint8_t> row_mask(std::size_t r) const {
    return std::span<const std::uint8_t>(mask).subspan(r * seq_len, seq_len);
  }
};

/// Groups consecutive sequences; the final batch may be short.
std::vector<PackedBatch> make_batches(std::span<const PackedSequence> sequences,
                                      std::size_t batch_size);

// ---------------------------------------------------------------------------
// JSON-lines files

Document parse_document_line(std::string_view line, const std::string& source, std::size_t line_no);
InstructionRecord parse_instruction_line(std::string_view line, const std::string& source,
                                         std::size_t line_no);
std::string document_to_json(const Document& doc);
std::string instruction_to_json(const InstructionRecord& rec);

std::vector<Document> read_documents(const std::filesystem::path& path);
std::vector<InstructionRecord> read_instructions(const std::filesystem::path& path);
/// All *.jsonl files in a directory, in filename order.
std::vector<Document> read_corpus_dir(const std::filesystem::path& dir);

void write_documents(std::ostream& out, std::span<const Document> docs);
void write_instructions(std::ostream& out, std::span<const InstructionRecord> records);

}  // namespace hytune

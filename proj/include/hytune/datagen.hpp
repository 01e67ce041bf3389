#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "hytune/corpus.hpp"
#include "hytune/errors.hpp"

namespace hytune {

// ---------------------------------------------------------------------------
// Completion service

struct CompletionRequest {
  std::string prompt;
  std::size_t max_length = 512;
};

class CompletionError : public Error {
 public:
  using Error::Error;
};

/// Text-in/text-out completion service. Implementations must be safe to call
/// from several threads at once.
class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  virtual std::string complete(const CompletionRequest& request) = 0;
  /// Calls made so far, including failed ones.
  virtual std::size_t calls() const = 0;
};

struct MockOptions {
  std::uint64_t seed = 0;
  /// Probability that a generated Q/A block is malformed.
  double malformed_rate = 0.0;
  /// Every call after this many calls throws. 0 disables.
  std::size_t fail_after_calls = 0;
  /// The first n attempts for each distinct prompt throw.
  std::size_t transient_failures = 0;
};

/// Offline client: the completion is a pure function of (prompt, seed). It
/// answers with as many Q/A blocks as the prompt's "Number of pairs: N" line
/// asks for, built from words of the prompt and a small finance vocabulary.
class MockCompletionClient final : public CompletionClient {
 public:
  explicit MockCompletionClient(MockOptions options = {});
  std::string complete(const CompletionRequest& request) override;
  std::size_t calls() const override { return calls_.load(); }

 private:
  MockOptions options_;
  std::atomic<std::size_t> calls_{0};
  std::mutex mutex_;
  std::unordered_map<std::string, std::size_t> attempts_;
};

/// POSTs {"prompt", "max_length"} as JSON to an http(s) endpoint and reads the
/// "completion" field of the JSON reply. Sends "Authorization: Bearer <token>"
/// when the token environment variable is set.
class HttpCompletionClient final : public CompletionClient {
 public:
  HttpCompletionClient(std::string endpoint, std::chrono::milliseconds timeout,
                       std::string token_env = "HYTUNE_COMPLETION_TOKEN");
  std::string complete(const CompletionRequest& request) override;
  std::size_t calls() const override { return calls_.load(); }

 private:
  std::string origin_;
  std::string path_;
  std::chrono::milliseconds timeout_;
  std::optional<std::string> token_;
  std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Generation

using FieldValue = std::variant<std::string, std::int64_t, double, bool>;

struct StructuredRecord {
  std::string entity;
  std::map<std::string, FieldValue> fields;
};

struct GenerationOptions {
  std::size_t pairs_per_request = 4;
  std::size_t few_shot = 3;
  std::size_t max_in_flight = 4;
  /// Retries per request after the first failed attempt.
  std::size_t retry_budget = 2;
  std::size_t max_length = 1024;
  double dedup_threshold = 0.7;
  /// Self-Instruct issues at most overgeneration * ceil(target / pairs_per_request) requests.
  std::size_t overgeneration = 4;
};

struct GenerationStats {
  std::size_t requests = 0;         // requests attempted
  std::size_t failed_requests = 0;  // requests that exhausted their retries
  std::size_t generated = 0;        // Q/A blocks examined
  std::size_t parse_failures = 0;
  std::size_t dedup_removed = 0;
  std::size_t emitted = 0;
  std::vector<std::string> errors;

  bool reconciles() const { return emitted + parse_failures + dedup_removed == generated; }
};

struct GenerationResult {
  std::vector<InstructionRecord> records;
  GenerationStats stats;
};

inline constexpr const char* kPromptTemplateVersion = "v1";

/// Upper bound on client calls made by self_instruct_expand.
std::size_t self_instruct_call_budget(std::size_t target_count, const GenerationOptions& options);

GenerationResult self_instruct_expand(std::span<const InstructionRecord> seeds,
                                      CompletionClient& client, std::size_t target_count,
                                      std::uint64_t seed, const GenerationOptions& options = {});

GenerationResult self_qa_unstructured(const Document& doc, CompletionClient& client,
                                      std::size_t n_pairs, const GenerationOptions& options = {});

GenerationResult self_qa_structured(const StructuredRecord& record, CompletionClient& client,
                                    std::size_t n_pairs, const GenerationOptions& options = {});

/// Deterministic table with sorted field names.
std::string serialize_structured(const StructuredRecord& record);

StructuredRecord parse_structured_line(std::string_view line, const std::string& source,
                                       std::size_t line_no);
std::vector<StructuredRecord> read_structured(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Parsing and filtering

/// One blank-line separated block of a completion; nullopt when it is not
/// exactly a "Q: ..." line followed by an "A: ..." line.
using QaBlock = std::optional<std::pair<std::string, std::string>>;
std::vector<QaBlock> parse_qa_blocks(std::string_view completion);

/// Lowercase ASCII, collapsed whitespace, trimmed.
std::string normalize_text(std::string_view text);
/// Jaccard similarity of character-trigram sets of the normalized texts.
double trigram_jaccard(std::string_view a, std::string_view b);

/// Drops a record when its normalized instruction equals, or has trigram
/// Jaccard above threshold with, an earlier survivor. Survivors keep order.
std::vector<InstructionRecord> dedup_filter(std::span<const InstructionRecord> records,
                                            double threshold = 0.7,
                                            std::size_t* removed = nullptr);

}  // namespace hytune

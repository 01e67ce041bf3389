#include "hytune/experiment.hpp"

#include "hytune/errors.hpp"
#include "hytune/rng.hpp"

namespace hytune {

namespace {

constexpr std::uint64_t kTrainSalt = 0x747261696e;  // "train"
constexpr std::uint64_t kEvalSalt = 0x6576616c;     // "eval"

SyntheticCorpusSpec synthetic_spec(const RunSection& run, std::uint64_t salt) {
  SyntheticCorpusSpec spec;
  spec.seed = mix_seed(run.seed, salt);
  spec.pretrain_docs = run.synthetic_pretrain_docs;
  spec.instruction_docs = run.synthetic_instruction_docs;
  spec.words_per_doc = run.synthetic_words_per_doc;
  return spec;
}

void append(std::vector<Document>& to, std::vector<Document> from) {
  to.insert(to.end(), std::make_move_iterator(from.begin()), std::make_move_iterator(from.end()));
}

std::vector<Document> of_domain(const std::vector<Document>& docs, Domain domain) {
  std::vector<Document> out;
  for (const Document& d : docs) {
    if (d.domain == domain) {
      out.push_back(d);
    }
  }
  return out;
}

struct DomainCorpora {
  std::vector<Document> general;
  std::vector<Document> financial;
};

DomainCorpora training_domains(const RunConfig& config) {
  const RunSection& run = config.run;
  DomainCorpora out;
  if (run.general_corpus || run.financial_corpus) {
    if (!run.general_corpus || !run.financial_corpus) {
      throw ValidationError("Run: General corpus and Financial corpus must be given together");
    }
    out.general = read_corpus_dir(*run.general_corpus);
    out.financial = read_corpus_dir(*run.financial_corpus);
  } else if (run.corpus) {
    const std::vector<Document> all = read_corpus_dir(*run.corpus);
    out.general = of_domain(all, Domain::general);
    out.financial = of_domain(all, Domain::financial);
  } else if (run.synthetic) {
    const SyntheticCorpusSpec spec = synthetic_spec(run, kTrainSalt);
    out.general = synthetic_corpus(Domain::general, spec, "train-g");
    out.financial = synthetic_corpus(Domain::financial, spec, "train-f");
  } else {
    throw ValidationError("Run: set Corpus, General corpus and Financial corpus, or Synthetic = True");
  }
  return out;
}

}  // namespace

std::vector<Document> load_training_corpus(const RunConfig& config) {
  DomainCorpora d = training_domains(config);
  std::vector<Document> all = std::move(d.general);
  append(all, std::move(d.financial));
  if (all.empty()) {
    throw ValidationError("training corpus is empty");
  }
  return all;
}

ExperimentSpec build_experiment(const RunConfig& config) {
  DomainCorpora train = training_domains(config);
  if (train.general.empty() || train.financial.empty()) {
    throw ValidationError("regime comparison needs general and financial training documents");
  }
  ExperimentSpec spec;
  spec.model = config.model;
  spec.loss_policy = config.run.loss_policy;
  spec.seeds = config.run.seeds.empty() ? std::vector<std::uint64_t>{config.run.seed}
                                        : config.run.seeds;

  if (config.run.general_eval || config.run.financial_eval) {
    if (!config.run.general_eval || !config.run.financial_eval) {
      throw ValidationError("Run: General eval and Financial eval must be given together");
    }
    spec.eval_general = read_documents(*config.run.general_eval);
    spec.eval_financial = read_documents(*config.run.financial_eval);
  } else if (config.run.synthetic) {
    const SyntheticCorpusSpec es = synthetic_spec(config.run, kEvalSalt);
    spec.eval_general = synthetic_corpus(Domain::general, es, "eval-g");
    spec.eval_financial = synthetic_corpus(Domain::financial, es, "eval-f");
  } else {
    throw ValidationError("Run: General eval and Financial eval are required without Synthetic");
  }

  const TrainingHyperparams& first = config.pretrain;
  const TrainingHyperparams& second = config.finetune ? *config.finetune : config.pretrain;
  spec.sequential.regime = Regime::sequential;
  spec.sequential.stages.push_back({"general", train.general, first});
  spec.sequential.stages.push_back({"financial", train.financial, second});

  TrainingHyperparams hybrid = first;
  const std::uint64_t budget = first.total_tokens + second.total_tokens;
  const double scale = static_cast<double>(budget) / static_cast<double>(first.total_tokens);
  hybrid.total_tokens = budget;
  hybrid.schedule.warmup_tokens = first.schedule.warmup_tokens * scale;
  hybrid.schedule.decay_tokens = first.schedule.decay_tokens * scale;
  std::vector<Document> all = std::move(train.general);
  append(all, std::move(train.financial));
  spec.hybrid.regime = Regime::hybrid;
  spec.hybrid.stages.push_back({"hybrid", std::move(all), hybrid});
  return spec;
}

}  // namespace hytune

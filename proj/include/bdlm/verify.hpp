#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bdlm/decode.hpp"
#include "bdlm/losses.hpp"
#include "bdlm/runconfig.hpp"

namespace bdlm {

struct OracleReport {
    std::string name;
    int64_t cases = 0;
    double max_deviation = 0.0;
    bool pass = false;
    std::string counterexample_path;  // set when a failing case was serialized
    std::string to_json() const;
};

/// Entrywise evaluation of the four-case block-diffusion mask definition.
/// Written against the math only; shares no code with the mask builder.
bool bdlm_mask_oracle_entry(const PackedLayout& layout, int64_t i, int64_t j);

using MaskBuilder = std::function<AttentionMask(const PackedLayout&)>;

/// Exhaustive comparison of the mask builder against the entrywise oracle
/// for every sequence length up to max_len, every dividing block size and
/// every contiguous document partition. Failures serialize a replay file
/// into counterexample_dir (when non-empty).
OracleReport mask_oracle(int64_t max_len, const std::string& counterexample_dir = "",
                         const MaskBuilder& builder = static_cast<AttentionMask (*)(
                             const PackedLayout&)>(&build_bdlm_mask));

/// Re-runs one serialized mask counterexample.
OracleReport replay_mask_case(const std::string& path,
                              const MaskBuilder& builder = static_cast<AttentionMask (*)(
                                  const PackedLayout&)>(&build_bdlm_mask));

/// Scalar-loop recomputation of the masked objectives on random toy
/// instances (double precision): weighted NLL arithmetic, the block-count-1
/// reduction, and the full-mask autoregressive limit.
OracleReport loss_oracle(int64_t instances, uint64_t seed);

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t components = 0;
    std::string worst_tensor;
};

/// Central-difference check of d(loss)/d(theta) for every parameter
/// component. build_loss must construct a fresh forward pass on each call.
GradCheckReport check_gradients(DenoiserParams<double>& params,
                                const std::function<Tensor<double>(Graph<double>&)>& build_loss,
                                double h = 1e-5);

// --- Deterministic grammar workload -----------------------------------------

struct GrammarData {
    std::vector<std::vector<TokenId>> corpus_docs;  // pretraining text
    std::vector<PairExample> sft_pairs;             // copy-task training pairs
    std::vector<PairExample> eval_pairs;            // held-out prompts
};

struct GrammarSpec {
    int64_t copy_len = 29;     // prompt "<s>=" is then exactly 32 bytes
    int64_t corpus_tokens = 90000;
    int64_t sft_pairs = 3000;
    int64_t eval_pairs = 150;
    int alphabet = 16;         // copy strings draw from 'a'..('a'+alphabet-1)
};

/// Mixture of copy lines "<s>=s", balanced a^n b^n strings and two-digit
/// addition lines; eval prompts are disjoint from the SFT pairs.
GrammarData make_grammar_data(const GrammarSpec& spec, uint64_t seed);

struct ExactMatchReport {
    double exact_match = 0.0;
    double mean_tpf = 0.0;
    int64_t evaluated = 0;
};

ExactMatchReport evaluate_exact_match(const DenoiserParams<float>& params,
                                      const ModelConfig& mcfg,
                                      const std::vector<PairExample>& pairs,
                                      const DecodeConfig& dcfg);

/// Mean probability assigned to correctly predicted masked response tokens,
/// on shared noise draws; used to compare confidence-trained models.
double mean_correct_confidence(const DenoiserParams<float>& params, const ModelConfig& mcfg,
                               const std::vector<PairExample>& pairs, int64_t block_size,
                               const NoiseSchedule& sched, uint64_t seed);

// --- End-to-end conversion experiment ---------------------------------------

struct PhaseLossSummary {
    std::string name;
    double start = 0.0;  // mean loss over the first window of steps
    double peak = 0.0;   // highest windowed mean later in the phase
    double end = 0.0;
};

struct ConversionReport {
    bool pass = false;
    bool diverged = false;
    std::string failure;
    double exact_match = 0.0;
    double decode_tpf = 0.0;
    double wall_seconds = 0.0;
    std::vector<PhaseLossSummary> phase_losses;
    MetricsLog metrics;
    std::string to_json() const;
};

struct ConversionOutcome {
    ConversionReport report;
    DenoiserParams<float> pretrained;
    DenoiserParams<float> converted;
    DenoiserParams<float> tuned;
    GrammarData data;
    TrainConfig config;
};

/// Desk-scale defaults for the conversion run (model size, budgets, decode).
TrainConfig conversion_config(uint64_t seed);

/// Full pipeline on the deterministic grammar: autoregressive pretraining
/// (block size 1, full masking), the warmup-stable-decay conversion with
/// top-k snapshot merging, then supervised tuning. Asserts that no phase
/// diverges, measures held-out exact match and decode parallelism. A failing
/// run dumps its metrics log into work_dir.
ConversionOutcome conversion_experiment(uint64_t seed, const std::string& work_dir,
                                        const GrammarSpec& spec = GrammarSpec{});

struct CapComparisonReport {
    double conf_base = 0.0, conf_cap = 0.0;
    double tpf_base = 0.0, tpf_cap = 0.0;
    double em_base = 0.0, em_cap = 0.0;
    bool confidence_increased = false;
    bool tpf_increased = false;
    bool em_within_two_points = false;
    std::string to_json() const;
};

/// Paired retraining from the converted checkpoint with and without the
/// confidence objective; reports confidence, parallelism and quality deltas.
CapComparisonReport cap_comparison(const ConversionOutcome& base, double lambda);

}  // namespace bdlm

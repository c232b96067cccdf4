#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bdlm/checkpoint.hpp"
#include "bdlm/losses.hpp"
#include "bdlm/schedule.hpp"

namespace bdlm {

struct TrainConfig {
    uint64_t seed = 0;
    Precision precision = Precision::single_prec;
    int64_t batch_size = 8;
    int64_t seq_len = 256;

    double learning_rate = 3e-4;
    int64_t lr_warmup_steps = 100;
    std::string lr_decay = "cosine";  // cosine | constant
    double lr_final_fraction = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;

    ModelConfig model;
    NoiseSchedule noise;
    StabilizerConfig stabilizer;
    CapConfig cap;
    DpoConfig dpo;

    int64_t final_block_size = 32;
    int64_t pretrain_tokens = 500000;
    int64_t convert_tokens = 500000;
    int64_t sft_steps = 300;
    int64_t dpo_steps = 50;
    int64_t save_every = 0;    // snapshot cadence within a phase; 0 = off
    int64_t merge_top_k = 0;   // 0 = keep the final state as-is
    int64_t eval_samples = 4;
    double eval_fraction = 0.05;
    bool timing_in_metrics = true;

    void validate() const {
        if (batch_size < 1 || seq_len < 1) throw std::invalid_argument("config: batch/seq");
        if (!(learning_rate > 0)) throw std::invalid_argument("config: learning_rate");
        if (lr_decay != "cosine" && lr_decay != "constant")
            throw std::invalid_argument("config: lr_decay must be cosine or constant");
        if (grad_clip <= 0) throw std::invalid_argument("config: grad_clip must be positive");
        model.validate();
        noise.validate();
    }
};

struct StepMetrics {
    int64_t step = 0;
    std::string phase;
    int64_t block_size = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double tokens_per_sec = 0.0;
};

struct MetricsLog {
    std::vector<StepMetrics> records;
    std::string to_jsonl() const;
    void write_file(const std::string& path) const;
};

/// Adam with decoupled weight decay. Moments live outside the graph and are
/// reset when a new phase constructs a fresh optimizer.
template <class S>
class AdamW {
public:
    AdamW(DenoiserParams<S>& params, double beta1, double beta2, double eps, double weight_decay)
        : params_(params), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
        for (const auto& [name, t] : params.items) {
            m_.emplace_back(t.numel(), S(0));
            v_.emplace_back(t.numel(), S(0));
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, double(t_));
        const double bc2 = 1.0 - std::pow(b2_, double(t_));
        for (size_t i = 0; i < params_.items.size(); ++i) {
            auto& tensor = params_.items[i].second;
            if (!tensor.has_grad()) continue;
            auto& val = tensor.values_mut();
            const auto& grad = tensor.grad();
            for (size_t j = 0; j < val.size(); ++j) {
                const S gj = grad[j];
                m_[i][j] = S(b1_) * m_[i][j] + S(1.0 - b1_) * gj;
                v_[i][j] = S(b2_) * v_[i][j] + S(1.0 - b2_) * gj * gj;
                const S mhat = m_[i][j] / S(bc1);
                const S vhat = v_[i][j] / S(bc2);
                val[j] -= S(lr) * (mhat / (std::sqrt(vhat) + S(eps_)) + S(wd_) * val[j]);
            }
        }
    }

private:
    DenoiserParams<S>& params_;
    double b1_, b2_, eps_, wd_;
    int64_t t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

/// Scale gradients to a global-norm bound; returns the post-clip norm.
template <class S>
double clip_grad_norm(DenoiserParams<S>& params, double max_norm) {
    double ss = 0.0;
    for (const auto& [name, t] : params.items) {
        if (!t.has_grad()) continue;
        for (S gv : t.grad()) ss += double(gv) * double(gv);
    }
    const double norm = std::sqrt(ss);
    if (norm > max_norm && norm > 0.0) {
        const S factor = S(max_norm / norm);
        for (auto& [name, t] : params.items) {
            if (!t.has_grad()) continue;
            for (auto& gv : t.data_->grad) gv *= factor;
        }
        return max_norm;
    }
    return norm;
}

inline double lr_at_step(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
    const int64_t warm = std::min<int64_t>(cfg.lr_warmup_steps, total_steps);
    if (step < warm) return cfg.learning_rate * double(step + 1) / double(warm);
    if (cfg.lr_decay == "constant" || total_steps <= warm) return cfg.learning_rate;
    const double lo = cfg.learning_rate * cfg.lr_final_fraction;
    const double progress = double(step - warm) / double(total_steps - warm);
    return lo + (cfg.learning_rate - lo) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

inline uint64_t phase_stream(const std::string& name) {
    uint64_t h = 5381;
    for (unsigned char c : name) h = h * 33 + c;
    return h;
}

template <class S>
struct PhaseData {
    const std::vector<PackedRow>* rows = nullptr;
    const std::vector<PairExample>* pairs = nullptr;
    const DenoiserParams<S>* ref = nullptr;  // frozen reference for dpo
};

template <class S>
struct PhaseResult {
    DenoiserParams<S> params;
    bool aborted = false;
    std::string abort_reason;
    double final_lr = 0.0;
};

namespace detail_trainer {

class EpochSampler {
public:
    EpochSampler(size_t n, uint64_t seed) : n_(n), seed_(seed) { reshuffle(); }
    size_t next() {
        if (cursor_ >= order_.size()) reshuffle();
        return order_[cursor_++];
    }

private:
    void reshuffle() {
        order_.resize(n_);
        for (size_t i = 0; i < n_; ++i) order_[i] = i;
        Rng rng(split_seed(seed_, epoch_++));
        for (size_t i = n_; i > 1; --i)
            std::swap(order_[i - 1], order_[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
        cursor_ = 0;
    }
    size_t n_;
    uint64_t seed_;
    uint64_t epoch_ = 0;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

/// Temporarily drops requires_grad so inference passes skip tape recording.
template <class S>
class NoGradGuard {
public:
    explicit NoGradGuard(const DenoiserParams<S>& p) : p_(p) {
        for (const auto& [name, t] : p.items) {
            saved_.push_back(t.requires_grad());
            t.data_->requires_grad = false;
        }
    }
    ~NoGradGuard() {
        for (size_t i = 0; i < p_.items.size(); ++i)
            p_.items[i].second.data_->requires_grad = saved_[i];
    }

private:
    const DenoiserParams<S>& p_;
    std::vector<bool> saved_;
};

}  // namespace detail_trainer

/// Runs one schedule phase with its objective and returns the trained
/// parameters. A non-finite loss aborts the phase and retains the parameters
/// from the last finite step. `snapshot` fires every cfg.save_every steps.
template <class S>
PhaseResult<S> train_phase(
    const TrainConfig& cfg, const Phase& phase, const PhaseData<S>& data, DenoiserParams<S> init,
    MetricsLog* log = nullptr, int64_t* global_step = nullptr, double lr_override = 0.0,
    const std::function<void(int64_t, const DenoiserParams<S>&)>& snapshot = {}) {
    cfg.validate();
    PhaseResult<S> res;
    res.params = std::move(init);

    int64_t steps = phase.steps;
    if (steps == 0 && phase.token_budget > 0) {
        const int64_t tokens_per_step = cfg.batch_size * cfg.seq_len;
        steps = (phase.token_budget + tokens_per_step - 1) / tokens_per_step;
    }
    if (steps <= 0) return res;  // zero-budget phase: init unchanged

    const bool token_objective = phase.objective == PhaseObjective::ar ||
                                 phase.objective == PhaseObjective::bdlm ||
                                 phase.objective == PhaseObjective::mdlm;
    if (token_objective && (!data.rows || data.rows->empty()))
        throw std::invalid_argument("train_phase: phase " + phase.name + " has no data rows");
    if (!token_objective && (!data.pairs || data.pairs->empty()))
        throw std::invalid_argument("train_phase: phase " + phase.name + " has no pair data");
    if (phase.objective == PhaseObjective::dpo && !data.ref)
        throw std::invalid_argument("train_phase: dpo needs a frozen reference model");

    const uint64_t phase_seed = split_seed(cfg.seed, phase_stream(phase.name));
    detail_trainer::EpochSampler sampler(
        token_objective ? data.rows->size() : data.pairs->size(), split_seed(phase_seed, 1));
    AdamW<S> opt(res.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);

    NoiseSchedule sched = cfg.noise;
    std::optional<double> force_t;
    if (phase.force_full_mask) {
        force_t = 1.0;
        sched.has_bandwidth = false;
    }

    using clock = std::chrono::steady_clock;
    for (int64_t step = 0; step < steps; ++step) {
        const auto t0 = clock::now();
        const double lr = lr_override > 0.0 ? lr_override : lr_at_step(cfg, step, steps);
        const uint64_t step_seed = split_seed(phase_seed, 100 + uint64_t(step));

        Graph<S> g;
        Tensor<S> loss_node;
        LossReport report;
        int64_t tokens_this_step = 0;

        if (token_objective) {
            std::vector<PackedRow> batch_rows;
            for (int64_t b = 0; b < cfg.batch_size; ++b)
                batch_rows.push_back((*data.rows)[sampler.next()]);
            for (const auto& r : batch_rows) tokens_this_step += r.layout.total_len;

            std::optional<LossResult<S>> loss;
            for (uint64_t attempt = 0; attempt < 8 && !loss; ++attempt) {
                NoisedBatch noised =
                    sample_noised(batch_rows, sched, split_seed(step_seed, attempt), force_t);
                if (phase.objective == PhaseObjective::mdlm) {
                    auto fwd = forward_mdlm_batch(g, res.params, cfg.model, noised, &cfg.stabilizer,
                                                  step, split_seed(step_seed, 31 + attempt));
                    loss = mdlm_loss(g, fwd, noised);
                } else {
                    auto fwd = forward_train_batch(g, res.params, cfg.model, noised,
                                                   &cfg.stabilizer, step,
                                                   split_seed(step_seed, 31 + attempt));
                    loss = bdlm_loss(g, fwd, noised);
                }
            }
            if (!loss)
                throw std::runtime_error("train_phase: batch produced no masked tokens after retries");
            loss_node = loss->value;
            report = loss->report;
        } else if (phase.objective == PhaseObjective::sft) {
            Tensor<S> acc;
            int halves = 0;
            double report_value = 0.0;
            for (int64_t b = 0; b < cfg.batch_size; ++b) {
                const PairExample& ex = (*data.pairs)[sampler.next()];
                PackedRow row = build_pair_row(ex.prompt, ex.response, phase.block_size);
                tokens_this_step += row.layout.total_len;
                const auto [lo, hi] = sched.effective_range();
                std::optional<std::pair<NoisedRow, NoisedRow>> pair;
                uint64_t attempt = 0;
                while (!pair && attempt < 8) {
                    Rng trng(split_seed(step_seed, 900 + uint64_t(b) * 17 + attempt));
                    const double t = std::clamp(trng.uniform(lo, hi), lo, std::min(hi, 0.999));
                    pair = complementary_pair_row(row, t,
                                                  split_seed(step_seed, 300 + uint64_t(b) * 13 + attempt));
                    ++attempt;
                }
                if (!pair) throw std::runtime_error("train_phase: degenerate complementary pair");
                for (const NoisedRow* half : {&pair->first, &pair->second}) {
                    NoisedBatch nb;
                    nb.rows.push_back(*half);
                    auto fwd = forward_train_batch(g, res.params, cfg.model, nb, &cfg.stabilizer,
                                                   step, split_seed(step_seed, 41 + uint64_t(b)));
                    auto sft = sft_loss(g, fwd, nb);
                    if (!sft) continue;  // skip-batch signal (cannot happen for a pair half)
                    auto conf = confidence_loss(g, fwd, nb);
                    auto cap = cap_loss(g, *sft, conf, cfg.cap);
                    report_value += cap.report.value;
                    acc = halves == 0 ? cap.value : add(g, acc, cap.value);
                    ++halves;
                }
            }
            if (halves == 0) throw std::runtime_error("train_phase: empty sft batch");
            loss_node = scale(g, acc, S(1) / S(halves));
            report.value = report_value / double(halves);
        } else {  // dpo
            Tensor<S> acc;
            double report_value = 0.0;
            for (int64_t b = 0; b < cfg.batch_size; ++b) {
                const PairExample& ex = (*data.pairs)[sampler.next()];
                tokens_this_step += int64_t(ex.prompt.size() + ex.chosen.size() + ex.rejected.size());
                auto dpo = dpo_loss(g, res.params, *data.ref, cfg.model, ex, phase.block_size,
                                    sched, cfg.dpo, split_seed(step_seed, 700 + uint64_t(b)));
                report_value += double(dpo.loss.item());
                acc = b == 0 ? dpo.loss : add(g, acc, dpo.loss);
            }
            loss_node = scale(g, acc, S(1) / S(cfg.batch_size));
            report.value = report_value / double(cfg.batch_size);
        }

        const double loss_value = double(loss_node.item());
        if (!std::isfinite(loss_value)) {
            res.aborted = true;
            res.abort_reason = "non-finite loss at phase " + phase.name + " step " +
                               std::to_string(step) + "; last-good parameters retained";
            break;
        }

        res.params.zero_grads();
        g.backward(loss_node);
        const double gnorm = clip_grad_norm(res.params, cfg.grad_clip);
        opt.step(lr);
        res.final_lr = lr;

        if (log) {
            const double dt = std::chrono::duration<double>(clock::now() - t0).count();
            StepMetrics m;
            m.step = global_step ? (*global_step) : step;
            m.phase = phase.name;
            m.block_size = phase.block_size;
            m.loss = loss_value;
            m.grad_norm = gnorm;
            m.tokens_per_sec =
                cfg.timing_in_metrics && dt > 0 ? double(tokens_this_step) / dt : 0.0;
            log->records.push_back(std::move(m));
        }
        if (global_step) ++(*global_step);
        if (cfg.save_every > 0 && snapshot && (step + 1) % cfg.save_every == 0)
            snapshot(step + 1, res.params);
    }
    return res;
}

/// Monte Carlo estimate of the masked objective on held-out rows, in
/// nats per maskable token. Rows must be packed at the evaluation block size;
/// mdlm_mode switches to the single-sequence forward.
template <class S>
double evaluate_elbo(const DenoiserParams<S>& params, const ModelConfig& mcfg,
                     const NoiseSchedule& sched, const std::vector<PackedRow>& rows,
                     int64_t n_samples, uint64_t seed, bool mdlm_mode = false) {
    if (rows.empty()) throw std::invalid_argument("evaluate_elbo: no rows");
    if (n_samples < 1) throw std::invalid_argument("evaluate_elbo: n_samples must be >= 1");
    detail_trainer::NoGradGuard<S> guard(params);
    double total = 0.0;
    for (int64_t s = 0; s < n_samples; ++s) {
        double weighted = 0.0;
        int64_t normalizer = 0;
        NoisedBatch noised = sample_noised(rows, sched, split_seed(seed, uint64_t(s)));
        Graph<S> g;
        auto fwd = mdlm_mode ? forward_mdlm_batch(g, params, mcfg, noised)
                             : forward_train_batch(g, params, mcfg, noised);
        for (size_t r = 0; r < fwd.size(); ++r) {
            const auto& row = noised.rows[r];
            normalizer += row.maskable_count();
            if (fwd[r].positions.empty()) continue;
            std::vector<int32_t> targets;
            for (int64_t pos : fwd[r].positions) targets.push_back(row.clean[size_t(pos)]);
            Tensor<S> nll = nll_rows(g, fwd[r].logits, targets);
            for (int64_t i = 0; i < nll.numel(); ++i)
                weighted += row.weight * double(nll.value_at(i));
        }
        if (normalizer == 0) throw std::invalid_argument("evaluate_elbo: rows have no tokens");
        total += weighted / double(normalizer);
    }
    return total / double(n_samples);
}

}  // namespace bdlm

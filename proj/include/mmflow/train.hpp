// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Training loops. Phase A trains the whole backbone on the domain's first
// modality alone (prompt-conditioned generation). Phase B freezes the backbone
// and trains per-modality adapters on the full stack under random partitions.

#include <functional>
#include <ostream>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mmflow/flow.hpp"
#include "mmflow/synth.hpp"

namespace mmflow {

enum class Phase { kBackbone, kAdapters };

inline const char* phase_tag(Phase p) { return p == Phase::kBackbone ? "A" : "B"; }

/// Renders clips on demand and keeps them, keyed by seed.
class ClipCache {
public:
    ClipCache(DomainSpec domain, std::size_t frames, std::size_t h, std::size_t w)
        : domain_(std::move(domain)), frames_(frames), h_(h), w_(w) {}

    explicit ClipCache(const RunConfig& cfg)
        : ClipCache(cfg.domain_spec(), static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.height),
                    static_cast<std::size_t>(cfg.width)) {}

    const RenderedClip& get(std::uint64_t seed) {
        auto it = cache_.find(seed);
        if (it == cache_.end()) {
            it = cache_.emplace(seed, render_clip(domain_, seed, frames_, h_, w_)).first;
        }
        return it->second;
    }

    const DomainSpec& domain() const { return domain_; }

private:
    DomainSpec domain_;
    std::size_t frames_, h_, w_;
    std::unordered_map<std::uint64_t, RenderedClip> cache_;
};

struct StepLog {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::vector<Partition> partitions;  // one per example
    std::vector<double> t;              // one per example
};

inline nlohmann::json to_json(const StepLog& s, const DomainSpec& domain) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : s.partitions) {
        nlohmann::json tg = nlohmann::json::array(), cd = nlohmann::json::array();
        for (int k : p.targets) {
            tg.push_back(domain.modalities[static_cast<std::size_t>(k)].name);
        }
        for (int k : p.conditions) {
            cd.push_back(domain.modalities[static_cast<std::size_t>(k)].name);
        }
        parts.push_back({{"targets", tg}, {"conditions", cd}});
    }
    return {{"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"partition", parts}, {"t", s.t}};
}

/// Freezes the backbone and attaches fresh adapters per the config's
/// ablation flags (shared adapters use twice the rank).
inline void prepare_finetune(DiTModel<float>& model, const RunConfig& cfg, Rng& rng) {
    model.set_base_trainable(false);
    const int rank = cfg.shared_lora ? 2 * cfg.lora_rank : cfg.lora_rank;
    model.attach_adapters(cfg.domain_spec(), rank, cfg.shared_lora, rng);
}

class Trainer {
public:
    Trainer(DiTModel<float>& model, const RunConfig& cfg, Phase phase)
        : model_(model),
          cfg_(cfg),
          phase_(phase),
          domain_(cfg.domain_spec()),
          policy_(PartitionPolicy::from_config(cfg, cfg.domain_spec())),
          clips_(cfg),
          opt_(AdamWOptions{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}) {
        split_ = make_split(cfg.data_seed, cfg.n_train, cfg.n_test, domain_, static_cast<std::size_t>(cfg.frames),
                            static_cast<std::size_t>(cfg.height), static_cast<std::size_t>(cfg.width));
        if (phase == Phase::kBackbone) {
            model_.set_base_trainable(true);
        } else {
            MMFLOW_CHECK(model_.has_adapters(), ErrorCode::kMissingAdapter, "phase B needs attached adapters");
        }
    }

    int total_steps() const { return phase_ == Phase::kBackbone ? cfg_.pretrain_steps : cfg_.finetune_steps; }
    int batch_size() const { return phase_ == Phase::kBackbone ? cfg_.pretrain_batch : cfg_.finetune_batch; }

    double lr_at(int step) const {
        return phase_ == Phase::kBackbone ? cosine_lr(step, total_steps(), cfg_.pretrain_lr_init, cfg_.pretrain_lr_final)
                                          : cosine_lr(step, total_steps(), cfg_.lr_init, cfg_.lr_final);
    }

    AttentionMode mode() const {
        return phase_ == Phase::kBackbone || cfg_.vanilla_attn ? AttentionMode::kVanilla : AttentionMode::kCrossModal;
    }

    /// Examples of step `step`; a pure function of (config, step).
    std::vector<FlowSample<float>> make_batch(int step, StepLog* log = nullptr) {
        Rng rng(mix64(cfg_.seed, static_cast<std::uint64_t>(step)));
        std::vector<FlowSample<float>> batch;
        for (int b = 0; b < batch_size(); ++b) {
            Rng ex = rng.fork(static_cast<std::uint64_t>(b));
            const std::uint64_t seed = split_.train[ex.below(split_.train.size())];
            const RenderedClip& clip = clips_.get(seed);
            std::vector<Tensor<float>> x;
            Partition part;
            if (phase_ == Phase::kBackbone) {
                x.push_back(data_to_model(clip.stack[0]));
                part = Partition::from_targets(1, {0});
            } else {
                for (const auto& c : clip.stack.clips) {
                    x.push_back(data_to_model(c));
                }
                part = sample_partition(ex, policy_, domain_.size());
            }
            const double t = sample_timestep(ex);
            const PromptSpec prompt = ex.bernoulli(policy_.prompt_drop) ? PromptSpec::null() : clip.prompt;
            batch.push_back(make_flow_sample(std::move(x), part, t, prompt, ex));
            if (log != nullptr) {
                log->partitions.push_back(part);
                log->t.push_back(t);
            }
        }
        return batch;
    }

    StepLog step(int step) {
        StepLog log;
        log.step = step;
        log.lr = lr_at(step);
        const auto batch = make_batch(step, &log);
        log.loss = train_step(model_, batch, opt_, log.lr, StepOptions{cfg_.no_gating, mode(), step});
        return log;
    }

    /// Runs steps [0, total) writing one JSON line per step to `log_out`.
    std::vector<double> run(std::ostream* log_out = nullptr,
                            const std::function<void(const StepLog&)>& on_step = nullptr) {
        std::vector<double> losses;
        losses.reserve(static_cast<std::size_t>(total_steps()));
        const DomainSpec log_domain = phase_ == Phase::kBackbone ? domain_.prefix(1) : domain_;
        for (int s = 0; s < total_steps(); ++s) {
            const StepLog rec = step(s);
            losses.push_back(rec.loss);
            if (log_out != nullptr) {
                *log_out << to_json(rec, log_domain).dump() << '\n';
            }
            if (on_step) {
                on_step(rec);
            }
        }
        return losses;
    }

    const Split& split() const { return split_; }
    ClipCache& clips() { return clips_; }

private:
    DiTModel<float>& model_;
    RunConfig cfg_;
    Phase phase_;
    DomainSpec domain_;
    PartitionPolicy policy_;
    ClipCache clips_;
    AdamW<float> opt_;
    Split split_;
};

/// Mean of losses[begin, end).
inline double window_mean(const std::vector<double>& losses, std::size_t begin, std::size_t end) {
    MMFLOW_CHECK(begin < end && end <= losses.size(), ErrorCode::kInvalidConfig, "bad loss window");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        s += losses[i];
    }
    return s / static_cast<double>(end - begin);
}

}  // namespace mmflow

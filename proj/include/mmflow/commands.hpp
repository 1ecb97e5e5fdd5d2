// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Operations behind the command-line tool. Each writes its artifacts under an
// output directory together with a manifest.json describing the run.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmflow/checkpoint.hpp"
#include "mmflow/gradcheck.hpp"
#include "mmflow/metrics.hpp"
#include "mmflow/train.hpp"

namespace mmflow {

namespace fs = std::filesystem;
using nlohmann::json;

// ─── shared helpers ────────────────────────────────────────────────────────

/// Attention mode a model is sampled and trained with.
inline AttentionMode model_mode(const DiTModel<float>& model) {
    return model.has_adapters() && !model.config().vanilla_attn ? AttentionMode::kCrossModal : AttentionMode::kVanilla;
}

/// Modalities a model generates: the whole domain once adapters exist, the
/// first modality alone for a backbone.
inline DomainSpec model_domain(const DiTModel<float>& model) {
    const DomainSpec d = model.config().domain_spec();
    return model.has_adapters() ? d : d.prefix(1);
}

inline Shape clip_shape(const RunConfig& cfg) {
    return {static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.height),
            static_cast<std::size_t>(cfg.width), 3};
}

/// Runs the Euler sampler with `model` for one partition. `conditions` are
/// DATA-space clips (empty at target slots).
inline ClipStack generate(DiTModel<float>& model, const Partition& partition, const std::vector<Tensor<float>>& conditions,
                          const PromptSpec& prompt, int steps, std::uint64_t seed) {
    const DomainSpec domain = model_domain(model);
    Rng rng(seed);
    return euler_sample(model_velocity(model, partition, prompt, model.config().no_gating, model_mode(model)), domain,
                        partition, conditions, clip_shape(model.config()), steps, rng);
}

/// Condition slots filled from a ground-truth stack.
inline std::vector<Tensor<float>> conditions_from(const ClipStack& gt, const Partition& p) {
    std::vector<Tensor<float>> c(gt.clips.size());
    for (int k : p.conditions) {
        c[static_cast<std::size_t>(k)] = gt[k];
    }
    return c;
}

inline std::string lower(std::string s) {
    for (char& c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return s;
}

inline json partition_json(const Partition& p, const DomainSpec& d) {
    json t = json::array(), c = json::array();
    for (int k : p.targets) {
        t.push_back(d.modalities[static_cast<std::size_t>(k)].name);
    }
    for (int k : p.conditions) {
        c.push_back(d.modalities[static_cast<std::size_t>(k)].name);
    }
    return {{"targets", t}, {"conditions", c}};
}

/// Metrics of a generated stack against ground truth. Target modalities are
/// scored against their ground truth when the task has conditions (the
/// generation is then tied to the clip); unconditional tasks only report
/// reference-free scores.
inline json stack_metrics(const ClipStack& pred, const ClipStack& gt, const Partition& p) {
    json m = json::object();
    const bool referenced = !p.conditions.empty();
    const bool intrinsic = pred.domain.consistency_rule == ConsistencyRule::kRenderEq;
    for (int k : p.targets) {
        const std::string name = lower(pred.domain.modalities[static_cast<std::size_t>(k)].name);
        m["flicker_" + name] = temporal_flickering(pred[k]);
        if (!referenced) {
            continue;
        }
        if (intrinsic && k == intrinsic::kNormal && pred.domain.size() > intrinsic::kNormal) {
            const AngularError e = normal_angular(pred[k], gt[k]);
            m["normal_mae_deg"] = e.mean_deg;
            m["normal_below_11_25"] = e.frac_below_11_25;
        } else if (!intrinsic && k == alpha::kAlpha && pred.domain.size() > alpha::kAlpha) {
            const MattingMetrics mm = matting_metrics(pred[k], gt[k]);
            m["alpha_mad"] = mm.mad;
            m["alpha_mse"] = mm.mse;
            m["alpha_dtssd"] = mm.dtssd;
        }
        m["psnr_" + name] = psnr(pred[k], gt[k]);
        m["ssim_" + name] = ssim(pred[k], gt[k]);
    }
    if (static_cast<int>(pred.clips.size()) == pred.domain.size() && pred.domain.size() == gt.domain.size() &&
        pred.domain.size() > 1) {
        m["consistency_residual"] = consistency_residual(pred);
    }
    return m;
}

/// Mean and population standard deviation of every numeric metric.
inline json summarize(const std::vector<json>& rows) {
    std::map<std::string, std::vector<double>> by_key;
    for (const auto& r : rows) {
        for (const auto& [k, v] : r.items()) {
            if (v.is_number() && k != "clip_seed") {
                by_key[k].push_back(v.get<double>());
            }
        }
    }
    json out = json::object();
    for (const auto& [k, vals] : by_key) {
        double mean = 0.0;
        for (double v : vals) {
            mean += v;
        }
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) {
            var += (v - mean) * (v - mean);
        }
        out[k] = {{"mean", mean}, {"stddev", std::sqrt(var / static_cast<double>(vals.size()))}, {"n", vals.size()}};
    }
    return out;
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ─── pretrain / finetune ───────────────────────────────────────────────────

struct TrainResult {
    RunManifest manifest;
    std::vector<double> losses;
};

inline json loss_summary(const std::vector<double>& losses) {
    json m = json::object();
    const std::size_t n = losses.size();
    m["final_loss"] = losses.back();
    if (n >= 100) {
        m["first100_mean_loss"] = window_mean(losses, 0, 100);
    }
    if (n >= 500) {
        m["trailing500_mean_loss"] = window_mean(losses, n - 500, n);
    }
    if (n >= 600) {
        m["loss_ratio"] = m["trailing500_mean_loss"].get<double>() / m["first100_mean_loss"].get<double>();
    }
    return m;
}

inline void progress_line(std::ostream* progress, const char* phase, const StepLog& s, int total, const Stopwatch& sw) {
    if (progress != nullptr && (s.step % 100 == 0 || s.step + 1 == total)) {
        *progress << "[" << phase << "] step " << s.step << "/" << total << " loss " << std::setprecision(4) << s.loss
                  << " lr " << s.lr << " (" << std::fixed << std::setprecision(1) << sw.seconds() << " s)"
                  << std::defaultfloat << std::endl;
    }
}

/// Phase A: trains the backbone on the domain's first modality.
inline TrainResult run_pretrain(const RunConfig& cfg, const fs::path& out, std::ostream* progress = nullptr) {
    cfg.validate();
    fs::create_directories(out);
    Rng init(cfg.seed);
    DiTModel<float> model(cfg, init);
    Trainer trainer(model, cfg, Phase::kBackbone);
    std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
    MMFLOW_CHECK(log.good(), ErrorCode::kIo, "cannot write training log");
    Stopwatch sw;
    TrainResult r;
    r.losses = trainer.run(&log, [&](const StepLog& s) { progress_line(progress, "A", s, trainer.total_steps(), sw); });
    RunManifest m;
    m.run_id = make_run_id(cfg, "A");
    m.phase = "A";
    m.start_step = 0;
    m.end_step = trainer.total_steps();
    m.metrics = loss_summary(r.losses);
    r.manifest = save_checkpoint(out, model, m);
    return r;
}

/// Fields that must agree between a backbone and the fine-tuning config.
inline void check_compatible(const RunConfig& base, const RunConfig& cfg) {
    const bool same = base.domain == cfg.domain && base.d_model == cfg.d_model && base.n_blocks == cfg.n_blocks &&
                      base.n_heads == cfg.n_heads && base.patch == cfg.patch && base.mlp_ratio == cfg.mlp_ratio &&
                      base.frames == cfg.frames && base.height == cfg.height && base.width == cfg.width;
    MMFLOW_CHECK(same, ErrorCode::kConfigMismatch, "backbone checkpoint dims/domain differ from the fine-tune config");
}

/// Copies backbone weights into `model` by name.
inline void copy_base_weights(DiTModel<float>& dst, DiTModel<float>& src) {
    auto d = dst.base_parameters();
    auto s = src.base_parameters();
    MMFLOW_CHECK(d.size() == s.size(), ErrorCode::kConfigMismatch, "backbone parameter count differs");
    for (std::size_t i = 0; i < d.size(); ++i) {
        MMFLOW_CHECK(d[i]->name == s[i]->name && d[i]->value.shape() == s[i]->value.shape(), ErrorCode::kConfigMismatch,
                     "backbone parameter " + s[i]->name + " differs");
        d[i]->value = s[i]->value;
    }
}

/// Largest |difference| between the adapter-equipped model and the bare
/// backbone over every stream of `in`.
inline double transparency_delta(DiTModel<float>& tuned, DiTModel<float>& base, const ForwardInputs<float>& in) {
    ForwardInputs<float> bare = in;
    bare.gates.assign(in.gates.size(), 0);
    const auto a = tuned.predict(in);
    const auto b = base.predict(bare);
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        worst = std::max(worst, static_cast<double>(max_abs_diff(a[k], b[k])));
    }
    return worst;
}

/// Phase B: freezes the backbone from `base_dir`, attaches fresh adapters and
/// trains them under stochastic condition masking.
inline TrainResult run_finetune(const RunConfig& cfg, const fs::path& base_dir, const fs::path& out,
                                std::ostream* progress = nullptr) {
    cfg.validate();
    LoadedCheckpoint base = load_checkpoint(base_dir);
    MMFLOW_CHECK(!base.manifest.adapters, ErrorCode::kConfigMismatch, "fine-tuning needs a backbone (phase A) checkpoint");
    check_compatible(base.config, cfg);
    fs::create_directories(out);

    Rng init(cfg.seed);
    DiTModel<float> model(cfg, init);
    copy_base_weights(model, *base.model);
    Rng adapter_rng(mix64(cfg.seed, 0xADA9ull));
    prepare_finetune(model, cfg, adapter_rng);
    Trainer trainer(model, cfg, Phase::kAdapters);

    // Fresh adapters must leave every stream's output untouched.
    const auto probe = trainer.make_batch(0);
    const double delta = transparency_delta(model, *base.model, probe.front().inputs(cfg.no_gating, trainer.mode()));
    MMFLOW_CHECK(delta == 0.0, ErrorCode::kInvalidConfig,
                 "fresh adapters changed the backbone output (max |delta| = " + std::to_string(delta) + ")");

    std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
    MMFLOW_CHECK(log.good(), ErrorCode::kIo, "cannot write training log");
    Stopwatch sw;
    TrainResult r;
    r.losses = trainer.run(&log, [&](const StepLog& s) { progress_line(progress, "B", s, trainer.total_steps(), sw); });
    RunManifest m;
    m.run_id = make_run_id(cfg, "B");
    m.phase = "B";
    m.base_hash = base.manifest.content_hash;
    m.start_step = 0;
    m.end_step = trainer.total_steps();
    m.metrics = loss_summary(r.losses);
    m.metrics["transparency_max_abs_delta"] = delta;
    m.metrics["trainable_params"] = trainable_param_count(model.adapters());
    r.manifest = save_checkpoint(out, model, m);
    return r;
}

// ─── sample ────────────────────────────────────────────────────────────────

struct SampleRequest {
    fs::path checkpoint;
    std::string preset;
    std::vector<std::string> targets;
    std::vector<std::string> conditions;
    fs::path inputs;                        // directory of <Modality>.uvx DATA-space blobs
    std::optional<std::uint64_t> clip_seed; // generate conditions (and GT) from this seed
    std::string prompt;                     // "k=v,..." | "null" | "" (clip prompt or null)
    std::uint64_t seed = 0;
    int steps = 0;                          // 0: config default
    fs::path out;
};

struct SampleResult {
    ClipStack stack;
    Partition partition;
    PromptSpec prompt;
    json report;
};

inline Partition resolve_partition(const DomainSpec& domain, const std::string& preset,
                                   const std::vector<std::string>& targets, const std::vector<std::string>& conditions,
                                   bool* prompt_required = nullptr) {
    if (!preset.empty()) {
        const TaskPreset tp = task_preset(preset, domain);
        if (prompt_required != nullptr) {
            *prompt_required = tp.prompt_required;
        }
        return tp.partition;
    }
    Partition p;
    for (const auto& t : targets) {
        p.targets.push_back(domain.index_of(t));
    }
    if (conditions.empty()) {
        p = Partition::from_targets(domain.size(), p.targets);
    } else {
        for (const auto& c : conditions) {
            p.conditions.push_back(domain.index_of(c));
        }
        std::sort(p.targets.begin(), p.targets.end());
        std::sort(p.conditions.begin(), p.conditions.end());
    }
    validate_partition(p, domain);
    return p;
}

inline SampleResult run_sample(const SampleRequest& req) {
    LoadedCheckpoint ck = load_checkpoint(req.checkpoint);
    DiTModel<float>& model = *ck.model;
    const DomainSpec domain = model_domain(model);
    bool prompt_required = false;
    const Partition p = model.has_adapters()
                            ? resolve_partition(domain, req.preset, req.targets, req.conditions, &prompt_required)
                            : (req.preset.empty() && req.targets.empty() && req.conditions.empty()
                                   ? Partition::from_targets(1, {0})
                                   : resolve_partition(domain, req.preset, req.targets, req.conditions));
    const int steps = req.steps > 0 ? req.steps : ck.config.sampler_steps;
    MMFLOW_CHECK(steps >= 1, ErrorCode::kInvalidSteps, "--steps must be >= 1");

    std::optional<RenderedClip> gt;
    if (req.clip_seed) {
        gt = render_clip(ck.config.domain_spec(), *req.clip_seed, static_cast<std::size_t>(ck.config.frames),
                         static_cast<std::size_t>(ck.config.height), static_cast<std::size_t>(ck.config.width));
    }
    std::vector<Tensor<float>> cond(static_cast<std::size_t>(domain.size()));
    for (int k : p.conditions) {
        const auto& name = domain.modalities[static_cast<std::size_t>(k)].name;
        if (!req.inputs.empty() && fs::exists(req.inputs / (name + ".uvx"))) {
            cond[static_cast<std::size_t>(k)] = read_blob(req.inputs / (name + ".uvx"));
        } else if (gt) {
            cond[static_cast<std::size_t>(k)] = gt->stack[k];
        }
        MMFLOW_CHECK(!cond[static_cast<std::size_t>(k)].empty(), ErrorCode::kMissingCondition,
                     "no input for condition " + name + " (use --inputs or --clip-seed)");
    }
    PromptSpec prompt = PromptSpec::null();
    if (!req.prompt.empty()) {
        prompt = parse_prompt(req.prompt, domain);
    } else if (gt) {
        prompt = gt->prompt;
    }
    MMFLOW_CHECK(!(prompt_required && prompt.is_null), ErrorCode::kMissingCondition,
                 "preset '" + req.preset + "' needs a prompt");

    SampleResult r;
    r.partition = p;
    r.prompt = prompt;
    r.stack = generate(model, p, cond, prompt, steps, req.seed);
    r.report = {{"checkpoint", fs::absolute(req.checkpoint).string()},
                {"preset", req.preset},
                {"partition", partition_json(p, domain)},
                {"prompt", format_prompt(prompt, domain)},
                {"seed", req.seed},
                {"steps", steps}};
    if (req.clip_seed) {
        r.report["clip_seed"] = *req.clip_seed;
    }
    if (domain.size() > 1) {
        r.report["consistency_residual"] = consistency_residual(r.stack);
    }
    if (gt) {
        ClipStack gt_view = gt->stack;
        gt_view.domain = domain;
        gt_view.clips.resize(static_cast<std::size_t>(domain.size()));
        r.report["metrics"] = stack_metrics(r.stack, gt_view, p);
    }
    if (!req.out.empty()) {
        fs::create_directories(req.out);
        for (int k : p.targets) {
            const auto& name = domain.modalities[static_cast<std::size_t>(k)].name;
            write_blob(req.out / (name + ".uvx"), r.stack[k]);
        }
        ClipStack targets_only{domain, std::vector<Tensor<float>>(r.stack.clips.size()), ValueSpace::kData};
        for (int k : p.targets) {
            targets_only.clips[static_cast<std::size_t>(k)] = r.stack[k];
        }
        export_ppm_frames(req.out, targets_only);
        write_json(req.out / "sample.json", r.report);
        RunManifest m;
        m.run_id = "sample-" + ck.manifest.content_hash.substr(0, 8) + "-s" + std::to_string(req.seed);
        m.config_hash = ck.manifest.config_hash;
        m.phase = ck.manifest.phase;
        m.content_hash = ck.manifest.content_hash;
        m.metrics = r.report.value("metrics", json::object());
        write_json(req.out / "manifest.json", to_json(m));
    }
    return r;
}

// ─── eval ──────────────────────────────────────────────────────────────────

inline std::vector<std::string> default_eval_tasks(const DiTModel<float>& model) {
    if (!model.has_adapters()) {
        return {"prior"};
    }
    if (model.config().domain == "alpha-toy") {
        return {"matting", "text-to-rgba"};
    }
    return {"normal-est", "inverse-rendering", "forward-rendering", "text-to-intrinsic"};
}

struct EvalOptions {
    std::vector<std::string> tasks;  // empty: defaults for the checkpoint
    int limit = 0;                   // 0: every test clip
    int steps = 0;                   // 0: config default
    std::uint64_t seed = 0;
    /// Score the ground truth against itself instead of sampling (harness self-test).
    bool oracle = false;
};

/// Runs every task over the held-out split and aggregates metrics.
inline json evaluate(DiTModel<float>& model, const EvalOptions& opt, std::ostream* progress = nullptr) {
    const RunConfig& cfg = model.config();
    const DomainSpec full = cfg.domain_spec();
    const DomainSpec domain = model_domain(model);
    const Split split = make_split(cfg.data_seed, cfg.n_train, cfg.n_test, full, static_cast<std::size_t>(cfg.frames),
                                   static_cast<std::size_t>(cfg.height), static_cast<std::size_t>(cfg.width));
    std::vector<std::uint64_t> seeds = split.test;
    if (opt.limit > 0 && static_cast<std::size_t>(opt.limit) < seeds.size()) {
        seeds.resize(static_cast<std::size_t>(opt.limit));
    }
    const int steps = opt.steps > 0 ? opt.steps : cfg.sampler_steps;
    const std::vector<std::string> tasks = opt.tasks.empty() ? default_eval_tasks(model) : opt.tasks;
    ClipCache clips(cfg);

    json report{{"domain", full.name},
                {"config_hash", config_hash(cfg)},
                {"sampler_steps", steps},
                {"seed", opt.seed},
                {"oracle", opt.oracle},
                {"test_seeds", seeds},
                {"metric_scales", {{"alpha_mad", 1e3}, {"alpha_mse", 1e3}, {"alpha_dtssd", 1e2}}},
                {"tasks", json::array()}};
    for (const auto& task : tasks) {
        const Partition p = task == "prior" ? Partition::from_targets(1, {0}) : task_preset(task, domain).partition;
        std::vector<json> rows;
        Stopwatch sw;
        for (std::uint64_t s : seeds) {
            const RenderedClip& clip = clips.get(s);
            ClipStack gt = clip.stack;
            gt.domain = domain;
            gt.clips.resize(static_cast<std::size_t>(domain.size()));
            const ClipStack pred =
                opt.oracle ? gt : generate(model, p, conditions_from(gt, p), clip.prompt, steps, mix64(opt.seed, s));
            json row = stack_metrics(pred, gt, p);
            row["clip_seed"] = s;
            row["task"] = task;
            rows.push_back(row);
        }
        if (progress != nullptr) {
            *progress << "[eval] " << task << ": " << seeds.size() << " clips in " << std::fixed << std::setprecision(1)
                      << sw.seconds() << " s" << std::defaultfloat << std::endl;
        }
        report["tasks"].push_back({{"task", task},
                                   {"partition", partition_json(p, domain)},
                                   {"prompt", "clip"},
                                   {"clips", rows},
                                   {"summary", summarize(rows)}});
    }
    return report;
}

inline json run_eval(const fs::path& checkpoint, const EvalOptions& opt, const fs::path& out,
                     std::ostream* progress = nullptr) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    json report = evaluate(*ck.model, opt, progress);
    report["checkpoint"] = fs::absolute(checkpoint).string();
    if (!out.empty()) {
        fs::create_directories(out);
        write_json(out / "report.json", report);
        RunManifest m;
        m.run_id = "eval-" + ck.manifest.content_hash.substr(0, 8);
        m.config_hash = ck.manifest.config_hash;
        m.phase = ck.manifest.phase;
        m.content_hash = ck.manifest.content_hash;
        for (const auto& t : report["tasks"]) {
            for (const auto& [k, v] : t["summary"].items()) {
                m.metrics[t["task"].get<std::string>() + "." + k] = v["mean"];
            }
        }
        write_json(out / "manifest.json", to_json(m));
    }
    return report;
}

// ─── harness checks shared by ablate and the tests ─────────────────────────

/// For `trials` random (input, adapter) draws, compares the gated linear of a
/// condition modality (gate taken from the partition and flags) with the bare
/// base linear. Returns the number of draws that were not bitwise identical.
inline int gate_bypass_violations(int trials, bool no_gating, std::uint64_t seed) {
    Rng rng(seed);
    const DomainSpec domain = DomainSpec::intrinsic_toy();
    int violations = 0;
    for (int i = 0; i < trials; ++i) {
        const std::size_t d_in = 8 + rng.below(24), d_out = 8 + rng.below(24), rows = 1 + rng.below(16);
        const int rank = 1 + static_cast<int>(rng.below(4));
        AdapterRegistry<float> reg({{"layer", d_in, d_out}}, domain, rank, false, 1.0f, rng);
        for (auto* p : reg.parameters()) {
            for (float& v : p->value.values()) {
                v = static_cast<float>(rng.normal());
            }
        }
        Tensor<float> x({rows, d_in}), w({d_out, d_in}), b({d_out});
        for (auto* t : {&x, &w, &b}) {
            for (float& v : t->values()) {
                v = static_cast<float>(rng.normal());
            }
        }
        Partition p;
        do {
            p = Partition::from_mask(domain.size(), static_cast<std::uint32_t>(rng.below(16)));
        } while (p.targets.empty() || p.conditions.empty());
        const std::vector<int> gates = gates_from_partition(p, domain.size(), no_gating);
        const int k = p.conditions[rng.below(p.conditions.size())];
        const Tensor<float> base = kernels::linear(x, w, &b);
        const Tensor<float> gated = apply_gated_linear(x, w, &b, reg, "layer", k, gates[static_cast<std::size_t>(k)]);
        violations += gated == base ? 0 : 1;
    }
    return violations;
}

/// Attention-mass matrices of every block for one forward pass.
inline std::vector<Tensor<double>> attention_masses(DiTModel<float>& model, const ForwardInputs<float>& in) {
    AttentionProbe probe;
    ForwardHooks hooks;
    hooks.attention = &probe;
    model.predict(in, hooks);
    return probe.mass;
}

/// True when every row of every matrix has a single unit entry.
inline bool rows_one_hot(const std::vector<Tensor<double>>& masses, double tol = 1e-6) {
    for (const auto& m : masses) {
        const std::size_t n = m.dim(0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double want = i == j ? 1.0 : 0.0;
                if (std::abs(m[i * n + j] - want) > tol) {
                    return false;
                }
            }
        }
    }
    return true;
}

// ─── ablate ────────────────────────────────────────────────────────────────

inline RunConfig with_variant(RunConfig cfg, const std::string& variant) {
    if (variant == "no_gating") {
        cfg.no_gating = true;
    } else if (variant == "shared_lora") {
        cfg.shared_lora = true;
    } else if (variant == "vanilla_attn") {
        cfg.vanilla_attn = true;
    } else if (variant != "full") {
        throw Error(ErrorCode::kUnknownVariant, "'" + variant + "' (expected no_gating|shared_lora|vanilla_attn)");
    }
    return cfg;
}

struct AblateOptions {
    std::string variant;
    fs::path base;       // backbone checkpoint
    fs::path reference;  // optional already-trained full model
    fs::path out;
    EvalOptions eval;
};

/// Trains the variant (and the full model unless a reference is supplied)
/// under the same seed and budget, checks the variant's structural claim and
/// writes a side-by-side metric table.
inline json run_ablate(const RunConfig& cfg, const AblateOptions& opt, std::ostream* progress = nullptr) {
    const RunConfig vcfg = with_variant(cfg, opt.variant);
    fs::create_directories(opt.out);
    const fs::path vdir = opt.out / opt.variant;
    run_finetune(vcfg, opt.base, vdir, progress);
    fs::path rdir = opt.reference;
    if (rdir.empty()) {
        rdir = opt.out / "full";
        run_finetune(with_variant(cfg, "full"), opt.base, rdir, progress);
    }
    LoadedCheckpoint var = load_checkpoint(vdir);
    LoadedCheckpoint ref = load_checkpoint(rdir);

    json checks = json::object();
    const std::size_t count = trainable_param_count(var.model->adapters());
    checks["trainable_params"] = count;
    checks["adapter_rank"] = var.model->adapters().rank();
    if (opt.variant == "no_gating") {
        const int v = gate_bypass_violations(100, true, cfg.seed);
        checks["gate_bypass_violations"] = v;
        checks["bypass_invariant_fails"] = v > 0;
    } else if (opt.variant == "shared_lora") {
        std::size_t expect = 0;
        for (const auto& l : var.model->adapted_layers()) {
            expect += static_cast<std::size_t>(2 * cfg.lora_rank) * (l.d_in + l.d_out);
        }
        checks["expected_params_rank_2r"] = expect;
        checks["rank_2r_accounting"] = count == expect;
    } else if (opt.variant == "vanilla_attn") {
        Trainer probe_src(*var.model, vcfg, Phase::kAdapters);
        const auto batch = probe_src.make_batch(0);
        checks["attention_rows_one_hot"] =
            rows_one_hot(attention_masses(*var.model, batch.front().inputs(vcfg.no_gating, AttentionMode::kVanilla)));
    }

    const json vrep = evaluate(*var.model, opt.eval, progress);
    const json rrep = evaluate(*ref.model, opt.eval, progress);
    json table = json::array();
    for (std::size_t t = 0; t < vrep["tasks"].size(); ++t) {
        const auto& vs = vrep["tasks"][t]["summary"];
        const auto& rs = rrep["tasks"][t]["summary"];
        for (const auto& [metric, v] : vs.items()) {
            table.push_back({{"task", vrep["tasks"][t]["task"]},
                             {"metric", metric},
                             {"full", rs.contains(metric) ? rs[metric]["mean"] : json(nullptr)},
                             {opt.variant, v["mean"]}});
        }
    }
    json report{{"variant", opt.variant},
                {"reference", fs::absolute(rdir).string()},
                {"checks", checks},
                {"comparison", table},
                {"variant_report", vrep},
                {"reference_report", rrep}};
    write_json(opt.out / "ablation.json", report);
    RunManifest m;
    m.run_id = "ablate-" + opt.variant + "-" + config_hash(vcfg).substr(0, 8);
    m.config_hash = config_hash(vcfg);
    m.phase = "B";
    m.content_hash = var.manifest.content_hash;
    m.base_hash = var.manifest.base_hash;
    m.metrics = checks;
    write_json(opt.out / "manifest.json", to_json(m));
    return report;
}

// ─── gradcheck ─────────────────────────────────────────────────────────────

struct GradcheckOptions {
    std::uint64_t seed = 0;
    bool gates_off = false;    // every adapter gated off and the backbone frozen
    bool corrupt = false;      // break one backward rule (harness sensitivity)
    std::size_t samples_per_param = 8;
};

/// The tiny double-precision configuration used for gradient checks.
inline RunConfig gradcheck_config() {
    RunConfig c;
    c.d_model = 16;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.mlp_ratio = 2;
    c.lora_rank = 2;
    c.frames = 4;
    c.height = 8;
    c.width = 8;
    return c;
}

/// Full flow-matching loss through the backbone, adapters and cross-modal
/// attention, checked against central differences. Every parameter is
/// randomized (including the zero-initialized ones) so no gradient path is
/// trivially zero.
inline GradCheckReport run_gradcheck(const GradcheckOptions& opt) {
    const RunConfig cfg = gradcheck_config();
    const DomainSpec domain = DomainSpec::intrinsic_toy().prefix(2);
    Rng rng(opt.seed);
    DiTModel<double> model(cfg, rng);
    model.attach_adapters(domain, cfg.lora_rank, false, rng);
    for (auto* p : model.all_parameters()) {
        for (double& v : p->value.values()) {
            v = 0.3 * rng.normal();
        }
    }
    if (opt.gates_off) {
        model.set_base_trainable(false);
    }
    const Shape shape{4, 8, 8, 3};
    std::vector<Tensor<double>> x;
    for (int k = 0; k < domain.size(); ++k) {
        Tensor<double> c(shape);
        for (double& v : c.values()) {
            v = rng.uniform(-1.0, 1.0);
        }
        x.push_back(std::move(c));
    }
    std::vector<FlowSample<double>> samples;
    samples.push_back(make_flow_sample(x, Partition::from_targets(2, {0}), 0.37, PromptSpec{ShapeKind::kSquare, Palette::kBlue, 2, Motion::kUp, false}, rng));
    samples.push_back(make_flow_sample(x, Partition::from_targets(2, {0, 1}), 0.81, PromptSpec::null(), rng));

    const bool saved_fault = fault_injection::corrupt_gelu_backward;
    fault_injection::corrupt_gelu_backward = opt.corrupt;
    GradCheckReport report;
    try {
        auto build = [&](Tape<double>& tape) {
            Var total;
            for (const auto& s : samples) {
                ForwardInputs<double> in = s.inputs(false, AttentionMode::kCrossModal);
                if (opt.gates_off) {
                    in.gates.assign(in.gates.size(), 0);
                }
                const Var l = fm_loss(tape, model.forward(tape, in), s, model.grid());
                total = total.valid() ? ops::add(tape, total, l) : l;
            }
            return total;
        };
        GradCheckOptions go;
        go.seed = opt.seed;
        go.samples_per_param = opt.samples_per_param;
        report = grad_check(build, model.all_parameters(), go);
    } catch (...) {
        fault_injection::corrupt_gelu_backward = saved_fault;
        throw;
    }
    fault_injection::corrupt_gelu_backward = saved_fault;
    return report;
}

inline json to_json(const GradCheckReport& r) {
    return {{"max_rel_error", r.max_rel_error}, {"coords_checked", r.coords_checked},
            {"worst_param", r.worst_param},     {"worst_index", r.worst_index},
            {"worst_analytic", r.worst_analytic}, {"worst_numeric", r.worst_numeric},
            {"max_abs_grad", r.max_abs_grad}};
}

}  // namespace mmflow

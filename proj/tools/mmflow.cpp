// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

// mmflow: pretrain | finetune | sample | eval | ablate | gradcheck

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmflow/commands.hpp"

namespace {

using namespace mmflow;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> steps;
};

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
    }
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* app, Common& c, bool config_required) {
    auto* opt = app->add_option("--config", c.config, "RunConfig JSON file");
    if (config_required) {
        opt->required();
    }
    app->add_option("--seed", c.seed, "Override the run seed");
    app->add_option("--out", c.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal flow-matching video toolkit"};
    app.require_subcommand(1);

    Common pre;
    auto* cmd_pretrain = app.add_subcommand("pretrain", "Train the backbone on the first modality");
    add_common(cmd_pretrain, pre, false);
    cmd_pretrain->add_option("--steps", pre.steps, "Override pretrain_steps");

    Common fin;
    std::string fin_base;
    auto* cmd_finetune = app.add_subcommand("finetune", "Train gated adapters on a frozen backbone");
    add_common(cmd_finetune, fin, false);
    cmd_finetune->add_option("--base", fin_base, "Backbone checkpoint directory")->required();
    cmd_finetune->add_option("--steps", fin.steps, "Override finetune_steps");

    SampleRequest sreq;
    std::string s_targets, s_conditions, s_checkpoint, s_inputs, s_out;
    std::optional<int> s_steps;
    std::optional<std::uint64_t> s_seed;
    std::string s_config;
    auto* cmd_sample = app.add_subcommand("sample", "Generate target modalities for a partition");
    cmd_sample->add_option("--checkpoint", s_checkpoint, "Checkpoint directory")->required();
    cmd_sample->add_option("--config", s_config, "Ignored; the checkpoint carries its config");
    cmd_sample->add_option("--preset", sreq.preset, "Task preset name");
    cmd_sample->add_option("--targets", s_targets, "Comma-separated target modalities");
    cmd_sample->add_option("--conditions", s_conditions, "Comma-separated condition modalities");
    cmd_sample->add_option("--inputs", s_inputs, "Directory of <Modality>.uvx condition blobs");
    cmd_sample->add_option("--clip-seed", sreq.clip_seed, "Take conditions and prompt from a generated clip");
    cmd_sample->add_option("--prompt", sreq.prompt, "k=v,... or null");
    cmd_sample->add_option("--seed", s_seed, "Sampler noise seed");
    cmd_sample->add_option("--steps", s_steps, "Euler steps");
    cmd_sample->add_option("--out", s_out, "Output directory")->required();

    std::string e_checkpoint, e_out, e_tasks, e_config;
    EvalOptions eopt;
    std::optional<int> e_steps;
    auto* cmd_eval = app.add_subcommand("eval", "Evaluate task presets on the held-out split");
    cmd_eval->add_option("--checkpoint", e_checkpoint, "Checkpoint directory")->required();
    cmd_eval->add_option("--config", e_config, "Ignored; the checkpoint carries its config");
    cmd_eval->add_option("--tasks", e_tasks, "Comma-separated presets (default: domain set)");
    cmd_eval->add_option("--preset", e_tasks, "Alias of --tasks");
    cmd_eval->add_option("--limit", eopt.limit, "Evaluate only the first N test clips");
    cmd_eval->add_option("--seed", eopt.seed, "Sampler noise seed");
    cmd_eval->add_option("--steps", e_steps, "Euler steps");
    cmd_eval->add_flag("--oracle", eopt.oracle, "Score ground truth against itself");
    cmd_eval->add_option("--out", e_out, "Output directory");

    Common abl;
    AblateOptions aopt;
    std::string a_base, a_reference, a_tasks;
    auto* cmd_ablate = app.add_subcommand("ablate", "Train an ablation variant and compare it to the full model");
    add_common(cmd_ablate, abl, false);
    cmd_ablate->add_option("--variant", aopt.variant, "no_gating | shared_lora | vanilla_attn")->required();
    cmd_ablate->add_option("--base", a_base, "Backbone checkpoint directory")->required();
    cmd_ablate->add_option("--reference", a_reference, "Already-trained full model checkpoint");
    cmd_ablate->add_option("--steps", abl.steps, "Override finetune_steps");
    cmd_ablate->add_option("--tasks", a_tasks, "Comma-separated presets to compare");
    cmd_ablate->add_option("--limit", aopt.eval.limit, "Evaluate only the first N test clips");

    Common gc;
    GradcheckOptions gopt;
    auto* cmd_grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
    add_common(cmd_grad, gc, false);
    cmd_grad->add_flag("--gates-off", gopt.gates_off, "Gate every adapter off and freeze the backbone");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_pretrain) {
            RunConfig cfg = resolve_config(pre);
            if (pre.steps) {
                cfg.pretrain_steps = *pre.steps;
            }
            cfg.validate();
            const auto r = run_pretrain(cfg, pre.out.empty() ? "runs/pretrain" : pre.out, &std::cerr);
            std::cout << to_json(r.manifest).dump(2) << std::endl;
        } else if (*cmd_finetune) {
            RunConfig cfg = resolve_config(fin);
            if (fin.steps) {
                cfg.finetune_steps = *fin.steps;
            }
            cfg.validate();
            const auto r = run_finetune(cfg, fin_base, fin.out.empty() ? "runs/finetune" : fin.out, &std::cerr);
            std::cout << to_json(r.manifest).dump(2) << std::endl;
        } else if (*cmd_sample) {
            sreq.checkpoint = s_checkpoint;
            sreq.targets = split_list(s_targets);
            sreq.conditions = split_list(s_conditions);
            sreq.inputs = s_inputs;
            sreq.out = s_out;
            sreq.seed = s_seed.value_or(0);
            sreq.steps = s_steps.value_or(0);
            if (s_steps) {
                MMFLOW_CHECK(*s_steps >= 1, ErrorCode::kInvalidSteps, "--steps must be >= 1");
            }
            const auto r = run_sample(sreq);
            std::cout << r.report.dump(2) << std::endl;
        } else if (*cmd_eval) {
            eopt.tasks = split_list(e_tasks);
            if (e_steps) {
                MMFLOW_CHECK(*e_steps >= 1, ErrorCode::kInvalidSteps, "--steps must be >= 1");
                eopt.steps = *e_steps;
            }
            const json report = run_eval(e_checkpoint, eopt, e_out, &std::cerr);
            json brief = json::object();
            for (const auto& t : report["tasks"]) {
                json s = json::object();
                for (const auto& [k, v] : t["summary"].items()) {
                    if (k != "clip_seed") {
                        s[k] = v["mean"];
                    }
                }
                brief[t["task"].get<std::string>()] = s;
            }
            std::cout << brief.dump(2) << std::endl;
        } else if (*cmd_ablate) {
            RunConfig cfg = resolve_config(abl);
            if (abl.steps) {
                cfg.finetune_steps = *abl.steps;
            }
            cfg.validate();
            aopt.base = a_base;
            aopt.reference = a_reference;
            aopt.out = abl.out.empty() ? "runs/ablate" : abl.out;
            aopt.eval.tasks = split_list(a_tasks);
            const json report = run_ablate(cfg, aopt, &std::cerr);
            std::cout << json{{"variant", report["variant"]}, {"checks", report["checks"]},
                              {"comparison", report["comparison"]}}
                             .dump(2)
                      << std::endl;
        } else if (*cmd_grad) {
            if (gc.seed) {
                gopt.seed = *gc.seed;
            }
            const GradCheckReport r = run_gradcheck(gopt);
            json j = to_json(r);
            j["threshold"] = 1e-3;
            j["passed"] = r.max_rel_error < 1e-3;
            if (!gc.out.empty()) {
                std::filesystem::create_directories(gc.out);
                write_json(std::filesystem::path(gc.out) / "gradcheck.json", j);
            }
            std::cout << j.dump(2) << std::endl;
            if (r.max_rel_error >= 1e-3) {
                std::cerr << "gradcheck FAILED: max relative error " << r.max_rel_error << " in " << r.worst_param
                          << std::endl;
                return 1;
            }
        }
    } catch (const mmflow::Error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}

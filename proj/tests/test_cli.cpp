// Copyright (C) 2026 The mmflow Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end tests of the mmflow executable on a tiny configuration.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "mmflow/blob.hpp"
#include "mmflow/config.hpp"
#include "mmflow/synth.hpp"
#include "json.hpp"

using namespace mmflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path work_dir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "mmflow_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

/// Runs the CLI with `args`; returns its exit status. Output goes to `log`.
int run(const std::string& args, const std::string& log = "last.log") {
    const std::string cmd =
        std::string(MMFLOW_CLI_PATH) + " " + args + " > " + (work_dir() / log).string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) { return read_file(p); }

json load(const fs::path& p) { return json::parse(slurp(p)); }

RunConfig tiny() {
    RunConfig c;
    c.d_model = 16;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.mlp_ratio = 2;
    c.lora_rank = 2;
    c.frames = 4;
    c.height = 8;
    c.width = 8;
    c.pretrain_steps = 20;
    c.finetune_steps = 20;
    c.n_train = 8;
    c.n_test = 4;
    c.sampler_steps = 3;
    return c;
}

/// Writes the tiny config and trains a backbone + adapters once.
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        cfg_path = work_dir() / "tiny.json";
        write_file(cfg_path, to_json(tiny()).dump(2));
        pre_rc = run("pretrain --config " + cfg_path.string() + " --out " + (work_dir() / "A").string(), "A.log");
        fin_rc = run("finetune --config " + cfg_path.string() + " --base " + (work_dir() / "A").string() + " --out " +
                         (work_dir() / "B").string(),
                     "B.log");
    }

    static inline fs::path cfg_path;
    static inline int pre_rc = -1, fin_rc = -1;
};

}  // namespace

TEST_F(Cli, PretrainAndFinetuneProduceCheckpoints) {
    ASSERT_EQ(pre_rc, 0) << slurp(work_dir() / "A.log");
    ASSERT_EQ(fin_rc, 0) << slurp(work_dir() / "B.log");
    for (const char* phase : {"A", "B"}) {
        const fs::path d = work_dir() / phase;
        for (const char* f : {"manifest.json", "weights.bin", "config.json", "train_log.jsonl"}) {
            EXPECT_TRUE(fs::exists(d / f)) << phase << "/" << f;
        }
    }
    const json a = load(work_dir() / "A" / "manifest.json");
    const json b = load(work_dir() / "B" / "manifest.json");
    EXPECT_EQ(a["phase"], "A");
    EXPECT_EQ(b["phase"], "B");
    EXPECT_EQ(b["base_hash"], a["content_hash"]);
    EXPECT_TRUE(a["adapters"].is_null());
    EXPECT_EQ(b["adapters"]["rank"], 2);
    EXPECT_EQ(b["metrics"]["transparency_max_abs_delta"], 0.0);
    EXPECT_EQ(b["end_step"], 20);
    // One JSON line per step.
    const std::string log = slurp(work_dir() / "B" / "train_log.jsonl");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 20);
}

TEST_F(Cli, SampleWritesBlobsAndIsDeterministic) {
    ASSERT_EQ(fin_rc, 0);
    const std::string ck = (work_dir() / "B").string();
    const fs::path s1 = work_dir() / "s1", s2 = work_dir() / "s2";
    ASSERT_EQ(run("sample --checkpoint " + ck + " --preset normal-est --clip-seed 5 --seed 3 --out " + s1.string()), 0)
        << slurp(work_dir() / "last.log");
    ASSERT_EQ(run("sample --checkpoint " + ck + " --preset normal-est --clip-seed 5 --seed 3 --out " + s2.string()), 0);
    const Tensor<float> n1 = read_blob(s1 / "Normal.uvx");
    EXPECT_EQ(n1.shape(), (Shape{4, 8, 8, 3}));
    EXPECT_EQ(slurp(s1 / "Normal.uvx"), slurp(s2 / "Normal.uvx"));
    EXPECT_FALSE(fs::exists(s1 / "RGB.uvx"));  // conditions are not re-emitted
    const json rep = load(s1 / "sample.json");
    EXPECT_EQ(rep["steps"], 3);
    EXPECT_TRUE(rep.contains("metrics"));

    // The same conditions supplied as blobs give the same sample.
    const fs::path in = work_dir() / "inputs";
    fs::create_directories(in);
    const auto clip = render_intrinsic_clip(5, 4, 8, 8);
    for (int k : {intrinsic::kRgb, intrinsic::kAlbedo, intrinsic::kIrradiance}) {
        write_blob(in / (std::string(DomainSpec::intrinsic_toy().modalities[static_cast<std::size_t>(k)].name) + ".uvx"),
                   clip.stack.clips[static_cast<std::size_t>(k)]);
    }
    const std::string prompt = "shape=disk,color=red,light=north,motion=left";
    const fs::path s3 = work_dir() / "s3", s4 = work_dir() / "s4";
    ASSERT_EQ(run("sample --checkpoint " + ck + " --preset normal-est --clip-seed 5 --prompt " + prompt +
                  " --seed 3 --out " + s3.string()),
              0);
    ASSERT_EQ(run("sample --checkpoint " + ck + " --preset normal-est --inputs " + in.string() + " --prompt " + prompt +
                  " --seed 3 --out " + s4.string()),
              0)
        << slurp(work_dir() / "last.log");
    EXPECT_EQ(slurp(s3 / "Normal.uvx"), slurp(s4 / "Normal.uvx"));
}

TEST_F(Cli, ErrorsExitWithCodeTwo) {
    ASSERT_EQ(fin_rc, 0);
    const std::string ck = (work_dir() / "B").string();
    const std::string out = " --out " + (work_dir() / "bad").string();
    EXPECT_EQ(run("sample --checkpoint " + ck + " --preset matting" + out), 2);                    // wrong domain
    EXPECT_EQ(run("sample --checkpoint " + ck + " --preset normal-est" + out), 2);                 // no condition
    EXPECT_EQ(run("sample --checkpoint " + ck + " --preset normal-est --clip-seed 1 --steps 0" + out), 2);
    EXPECT_EQ(run("sample --checkpoint " + ck + " --targets RGB --conditions RGB,Albedo" + out), 2);  // overlap
    EXPECT_EQ(run("sample --checkpoint " + (work_dir() / "missing").string() + " --preset normal-est" + out), 2);
    EXPECT_EQ(run("ablate --config " + cfg_path.string() + " --variant bogus --base " + (work_dir() / "A").string() +
                  out),
              2);
    const fs::path bad_cfg = work_dir() / "bad.json";
    write_file(bad_cfg, R"({"d_model": 16, "learning_rate": 3})");
    EXPECT_EQ(run("pretrain --config " + bad_cfg.string() + out), 2);
    EXPECT_EQ(run("finetune --config " + cfg_path.string() + " --base " + ck + out), 2);  // base has adapters
    EXPECT_NE(run(""), 0);
}

TEST_F(Cli, EvalWritesReport) {
    ASSERT_EQ(fin_rc, 0);
    const fs::path out = work_dir() / "eval";
    ASSERT_EQ(run("eval --checkpoint " + (work_dir() / "B").string() +
                  " --tasks normal-est,text-to-intrinsic --limit 2 --out " + out.string()),
              0)
        << slurp(work_dir() / "last.log");
    const json rep = load(out / "report.json");
    ASSERT_EQ(rep["tasks"].size(), 2u);
    EXPECT_EQ(rep["tasks"][0]["clips"].size(), 2u);
    EXPECT_TRUE(rep["tasks"][0]["summary"].contains("normal_mae_deg"));
    EXPECT_TRUE(rep["tasks"][1]["summary"].contains("consistency_residual"));

    // Oracle mode scores ground truth against itself.
    const fs::path oracle = work_dir() / "eval_oracle";
    ASSERT_EQ(run("eval --oracle --checkpoint " + (work_dir() / "B").string() + " --tasks normal-est --limit 2 --out " +
                  oracle.string()),
              0);
    const json orep = load(oracle / "report.json");
    EXPECT_EQ(orep["tasks"][0]["summary"]["normal_mae_deg"]["mean"], 0.0);
}

TEST_F(Cli, AblationChecks) {
    ASSERT_EQ(fin_rc, 0);
    const std::string common = "ablate --config " + cfg_path.string() + " --base " + (work_dir() / "A").string() +
                               " --reference " + (work_dir() / "B").string() + " --steps 5 --limit 1 --tasks normal-est";
    struct Case {
        const char* variant;
        const char* check;
    };
    for (const Case c : {Case{"no_gating", "bypass_invariant_fails"}, Case{"shared_lora", "rank_2r_accounting"},
                         Case{"vanilla_attn", "attention_rows_one_hot"}}) {
        const fs::path out = work_dir() / (std::string("ablate_") + c.variant);
        ASSERT_EQ(run(common + " --variant " + c.variant + " --out " + out.string()), 0)
            << c.variant << "\n"
            << slurp(work_dir() / "last.log");
        const json rep = load(out / "ablation.json");
        EXPECT_EQ(rep["checks"][c.check], true) << c.variant;
        EXPECT_FALSE(rep["comparison"].empty());
    }
}

TEST_F(Cli, GradcheckPasses) {
    ASSERT_EQ(run("gradcheck --out " + (work_dir() / "gc").string()), 0) << slurp(work_dir() / "last.log");
    const json rep = load(work_dir() / "gc" / "gradcheck.json");
    EXPECT_LT(rep["max_rel_error"].get<double>(), 1e-3);
    EXPECT_EQ(rep["passed"], true);
}

TEST_F(Cli, RerunIsBitwiseIdentical) {
    ASSERT_EQ(pre_rc, 0);
    const fs::path again = work_dir() / "A2";
    ASSERT_EQ(run("pretrain --config " + cfg_path.string() + " --out " + again.string()), 0);
    for (const char* f : {"weights.bin", "train_log.jsonl", "manifest.json", "config.json"}) {
        EXPECT_EQ(slurp(again / f), slurp(work_dir() / "A" / f)) << f;
    }
    // A different seed gives different weights.
    const fs::path other = work_dir() / "A3";
    ASSERT_EQ(run("pretrain --config " + cfg_path.string() + " --seed 9 --out " + other.string()), 0);
    EXPECT_NE(slurp(other / "weights.bin"), slurp(work_dir() / "A" / "weights.bin"));
}

TEST(Blob, RoundTripAndRejection) {
    Rng rng(1);
    Tensor<float> t({2, 3, 4, 3});
    for (float& v : t.values()) v = static_cast<float>(rng.normal());
    const std::string bytes = encode_blob(t);
    EXPECT_EQ(bytes.substr(0, 8), "UVXTENS1");
    EXPECT_EQ(bytes.size(), 16u + 4u + 4u * 4u + 4u * t.size());
    EXPECT_EQ(decode_blob(bytes), t);
    // Little-endian rank field.
    EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 4u);
    EXPECT_EQ(bytes[17], 0);
    try {
        decode_blob("NOTABLOB" + bytes.substr(8));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::kIo);
    }
    EXPECT_THROW(decode_blob(bytes.substr(0, bytes.size() - 4)), Error);
}

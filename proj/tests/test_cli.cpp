#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dcf/checkpoint.hpp"

#ifndef DCF_CLI
#error "DCF_CLI must name the dcformer executable"
#endif

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
    static const fs::path d = [] {
        const fs::path p = fs::temp_directory_path() / "dcf_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return d;
}

struct Result {
    int code;
    std::string out;
};

Result run(const std::string& args) {
    const fs::path out = work_dir() / "stdout.txt";
    const std::string cmd = std::string(DCF_CLI) + " " + args + " > " + out.string() + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, dcf::io::read_file(out.string())};
}

std::string write(const std::string& name, const nlohmann::json& j) {
    const fs::path p = work_dir() / name;
    std::ofstream(p) << j.dump();
    return p.string();
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("no-such-command").code, 1);
    EXPECT_EQ(run("analyze").code, 1);
    EXPECT_EQ(run("analyze --variant nano --input-shape 64,64").code, 1);
    EXPECT_EQ(run("analyze --variant nano --input-shape 64,0,64").code, 1);
    EXPECT_EQ(run("analyze --variant huge").code, 1);
    EXPECT_EQ(run("cost-curves --kinds conv4d").code, 1);
    EXPECT_EQ(run("gradcheck --op no_such_op").code, 1);
}

TEST(Cli, HelpExitsZeroAndDocumentsRunConfig) {
    EXPECT_EQ(run("--help").code, 0);
    const auto r = run("train --help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("strict_determinism"), std::string::npos);
}

TEST(Cli, AnalyzePrintsDeviationAndAttribution) {
    const auto r = run("analyze --variant nano --input-shape 512,512,256");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("exact match"), std::string::npos);
    EXPECT_NE(r.out.find("deviation nano"), std::string::npos);
    EXPECT_NE(r.out.find("attribution"), std::string::npos);
    // input too small for the /64 schedule
    EXPECT_EQ(run("analyze --variant nano --input-shape 16,16,16").code, 1);
}

TEST(Cli, CostCurvesWritesCsv) {
    const std::string csv = (work_dir() / "sweep.csv").string();
    EXPECT_EQ(run("cost-curves --kinds dwconv3d,decomp --k 3:7:2 --C 4 --dims 4,4,4 --csv " + csv).code, 0);
    const std::string text = dcf::io::read_file(csv);
    EXPECT_EQ(text.substr(0, text.find('\n')), "kind,k,C,H,W,D,params,flops");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
}

TEST(Cli, DataAndFormatErrorsExitTwo) {
    const std::string missing = (work_dir() / "missing").string();
    EXPECT_EQ(run("gen-data --spec " + missing + ".json --out " + missing).code, 2);
    EXPECT_EQ(run("gen-data --spec " + write("bad_spec.json", {{"n_train", 0}, {"n_val", 0}}) + " --out " + missing).code, 2);
    EXPECT_EQ(run("gen-data --spec " + write("typo_spec.json", {{"n_trian", 4}}) + " --out " + missing).code, 2);
    EXPECT_EQ(run("eval-zeroshot --ckpt " + missing + ".dcf --data " + missing).code, 2);
    const std::string junk = (work_dir() / "junk.dcf").string();
    std::ofstream(junk) << "not a checkpoint";
    EXPECT_EQ(run("retrieve --ckpt " + junk + " --data " + missing).code, 2);
    EXPECT_FALSE(fs::exists(missing));
}

TEST(Cli, GradcheckPassesAndNegativeControlFails) {
    const auto ok = run("gradcheck --all --seed 3");
    EXPECT_EQ(ok.code, 0);
    EXPECT_NE(ok.out.find("dcformer_block"), std::string::npos);
    EXPECT_EQ(run("gradcheck --op gelu --seed 3").code, 0);
    EXPECT_EQ(run("gradcheck --op gelu --seed 3 --inject-fault gelu").code, 3);
}

TEST(Cli, PipelineOnTinyDataset) {
    const fs::path d = work_dir();
    nlohmann::json spec{{"shape", {32, 32, 32}}, {"n_train", 6}, {"n_val", 1}, {"seed", 5},
                        {"abnormalities",
                         {{{"name", "sphere"}, {"shape", "sphere"}, {"prevalence", 0.5}, {"intensity", 700},
                           {"size", {3, 5}}}}}};
    const auto gen = run("gen-data --spec " + write("spec.json", spec) + " --out " + (d / "data").string());
    ASSERT_EQ(gen.code, 0);
    EXPECT_NE(gen.out.find("empirical"), std::string::npos);

    nlohmann::json model{{"name", "small"}, {"stem_dim", 4}, {"dims", {4, 4, 4, 4}}, {"depths", {1, 1, 1, 1}},
                         {"stem_first_stride", 2}};
    nlohmann::json cfg{{"model", model},  {"dataset", (d / "data").string()}, {"output", (d / "run").string()},
                       {"epochs", 1},     {"batch_size", 3},                  {"lr", 1e-3}};
    ASSERT_EQ(run("--strict train --config " + write("run.json", cfg)).code, 0);
    const std::string ck = (d / "run" / "checkpoint.dcf").string();
    cfg["bogus"] = 1;
    EXPECT_EQ(run("train --config " + write("bad_run.json", cfg)).code, 1);

    const auto rt = run("retrieve --ckpt " + ck + " --data " + (d / "data").string() + " --k 1");
    ASSERT_EQ(rt.code, 0);
    const auto rj = nlohmann::json::parse(rt.out);
    EXPECT_EQ(rj["text_to_image"]["recall"]["R@1"], 1.0);  // one validation pair
    EXPECT_EQ(rj["image_to_text"]["recall"]["R@1"], 1.0);
    EXPECT_EQ(run("retrieve --ckpt " + ck + " --data " + (d / "data").string() + " --k 0").code, 1);

    const std::string zs_out = (d / "metrics" / "zs.json").string();
    ASSERT_EQ(run("eval-zeroshot --ckpt " + ck + " --data " + (d / "data").string() + " --out " + zs_out).code, 0);
    EXPECT_TRUE(nlohmann::json::parse(dcf::io::read_file(zs_out)).contains("metrics"));

    const auto ft = run("finetune --ckpt " + ck + " --data " + (d / "data").string() + " --epochs 3");
    ASSERT_EQ(ft.code, 0);
    EXPECT_TRUE(nlohmann::json::parse(ft.out)["encoder_unchanged"].get<bool>());
}

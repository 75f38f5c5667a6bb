// dcformer: command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 gradient check failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/cost_model.hpp"
#include "dcf/gradcheck.hpp"
#include "dcf/synth.hpp"
#include "dcf/train.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitGradcheck = 3;

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::vector<std::size_t> parse_uint_list(const std::string& s, const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (item.empty() || pos != item.size() || item[0] == '-') {
            throw UsageError(std::string("bad ") + what + " '" + s + "'");
        }
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty()) throw UsageError(std::string("empty ") + what);
    return out;
}

std::array<std::size_t, 3> parse_dims(const std::string& s, const char* what) {
    const auto v = parse_uint_list(s, what);
    if (v.size() != 3) throw UsageError(std::string(what) + " needs three values H,W,D, got '" + s + "'");
    for (std::size_t e : v) {
        if (e == 0) throw UsageError(std::string(what) + " extents must be positive");
    }
    return {v[0], v[1], v[2]};
}

nlohmann::json read_json_file(const std::string& path) {
    const std::string text = dcf::io::read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw dcf::FormatError(path + ": " + e.what());
    }
}

dcf::ModelConfig resolve_variant(const std::string& v) {
    if (v.size() > 5 && v.substr(v.size() - 5) == ".json") return dcf::ModelConfig::from_json(read_json_file(v));
    return dcf::ModelConfig::by_name(v);
}

void emit_json(const nlohmann::json& j, const std::string& out) {
    const std::string text = j.dump(2) + "\n";
    if (!out.empty()) {
        const auto parent = std::filesystem::path(out).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        dcf::io::write_file(out, text);
    }
    std::cout << text;
}

template <typename F>
auto with_dtype(const std::string& ckpt, F&& f) {
    return dcf::checkpoint_dtype(ckpt) == "f64" ? f(double{}) : f(float{});
}

// --- analyze -----------------------------------------------------------------

int cmd_analyze(const std::string& variant, const std::string& shape, const std::string& csv) {
    const dcf::ModelConfig cfg = resolve_variant(variant);
    const auto input = parse_dims(shape, "--input-shape");
    const dcf::cost::CostReport rep = dcf::cost::model_cost(cfg, input);

    std::cout << "variant " << cfg.name << "  input " << input[0] << "x" << input[1] << "x" << input[2] << "\n";
    std::cout << std::left << std::setw(24) << "path" << std::setw(18) << "kind" << std::right << std::setw(12)
              << "params" << std::setw(18) << "flops" << "  output\n";
    for (const auto& r : rep.rows) {
        std::cout << std::left << std::setw(24) << r.path << std::setw(18) << r.kind << std::right << std::setw(12)
                  << r.params << std::setw(18) << r.flops << "  " << dcf::shape_str(r.output) << "\n";
    }
    dcf::Encoder<float> enc(cfg, 0);
    const std::size_t inst = enc.parameter_count();
    std::cout << "total params " << rep.total_params << " (instantiated " << inst << ", "
              << (inst == rep.total_params ? "exact match" : "MISMATCH") << ")\n";
    std::cout << "total FLOPs " << rep.total_flops << " (2 per MAC), MACs " << rep.total_macs() << "\n";
    if (const auto ref = dcf::cost::published_reference(cfg.name)) {
        const auto at_ref = dcf::cost::model_cost(cfg, dcf::cost::kReferenceInput);
        std::cout << "reference at 512x512x256: " << ref->params_m << " M params, " << ref->gflops << " GFLOPs\n";
        std::cout << "deviation " << dcf::cost::format_deviation(dcf::cost::deviation(at_ref, *ref)) << "\n";
        std::cout << "attribution: " << dcf::cost::kDeviationAttribution << "\n";
    }
    if (!csv.empty()) dcf::io::write_file(csv, dcf::cost::report_csv(rep));
    return inst == rep.total_params ? 0 : kExitData;
}

// --- cost-curves ---------------------------------------------------------------

int cmd_cost_curves(const std::string& kinds_s, const std::string& k_s, std::size_t c, const std::string& dims_s,
                    const std::string& csv) {
    std::vector<dcf::cost::SweepKind> kinds;
    std::stringstream ss(kinds_s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            kinds.push_back(dcf::cost::parse_sweep_kind(item));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    if (kinds.empty()) throw UsageError("--kinds is empty");
    std::vector<dcf::cost::u64> ks;
    try {
        ks = dcf::cost::parse_k_range(k_s);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto dims = parse_dims(dims_s, "--dims");
    const std::string text = dcf::cost::sweep_csv(dcf::cost::sweep_costs(kinds, ks, c, dims));
    if (!csv.empty()) dcf::io::write_file(csv, text);
    std::cout << text;
    return 0;
}

// --- gen-data ------------------------------------------------------------------

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
    const dcf::SynthSpec spec = dcf::SynthSpec::from_json(read_json_file(spec_path));
    std::cout << dcf::generate_dataset(spec, out).dump(2) << "\n";
    return 0;
}

// --- train ---------------------------------------------------------------------

int cmd_train(const std::string& config, bool strict, bool resume) {
    dcf::RunConfig run = dcf::RunConfig::from_json(read_json_file(config));
    if (strict) run.strict_determinism = true;
    if (resume) run.resume = true;
    const auto res = dcf::train_clip_any(run, &std::cerr);
    std::cout << res.to_json().dump(2) << "\n";
    return 0;
}

// --- gradcheck -----------------------------------------------------------------

int cmd_gradcheck(const std::string& op, std::uint64_t seed, const std::string& fault, const std::string& out) {
    dcf::gradcheck::Options opt{seed, fault};
    std::vector<dcf::gradcheck::OpResult> results;
    try {
        results = dcf::gradcheck::run(op, opt);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    bool ok = true;
    for (const auto& r : results) {
        std::cout << std::left << std::setw(20) << r.op << " max rel err " << std::scientific << std::setprecision(3)
                  << r.max_rel_err << "  tol " << r.tolerance << "  entries " << std::defaultfloat << r.entries
                  << "  " << (r.passed() ? "ok" : "FAIL") << "\n";
        ok = ok && r.passed();
    }
    if (!out.empty()) dcf::io::write_file(out, dcf::gradcheck::to_json(results).dump(2) + "\n");
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    return ok ? 0 : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dcformer: decomposed-convolution 3D encoder, cost model, contrastive training and evaluation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    bool strict = false;
    app.add_flag("--strict", strict, "Single-threaded bit-reproducible execution (DCF_THREADS caps threads otherwise)");

    // analyze
    auto* an = app.add_subcommand("analyze", "Per-layer parameter/FLOP report for a model variant");
    std::string an_variant, an_shape = "512,512,256", an_csv;
    an->add_option("--variant", an_variant, "nano | naive | tiny | micro | path/to/config.json")->required();
    an->add_option("--input-shape", an_shape, "Input extents H,W,D")->capture_default_str();
    an->add_option("--csv", an_csv, "Write per-layer rows (" + std::string(dcf::cost::kReportCsvHeader) + ")");

    // cost-curves
    auto* cc = app.add_subcommand("cost-curves", "Parameter/FLOP sweep over kernel sizes");
    std::string cc_kinds = "dwconv3d,decomp", cc_k = "1:13:2", cc_dims = "32,32,32", cc_csv;
    std::size_t cc_c = 32;
    cc->add_option("--kinds", cc_kinds, "Comma list of conv2d, conv3d, dwconv2d, dwconv3d, decomp")
        ->capture_default_str();
    cc->add_option("--k", cc_k, "Kernel sizes lo:hi:step or a,b,c")->capture_default_str();
    cc->add_option("--C", cc_c, "Channels")->capture_default_str()->check(CLI::PositiveNumber);
    cc->add_option("--dims", cc_dims, "Extents H,W,D")->capture_default_str();
    cc->add_option("--csv", cc_csv, "Write CSV (" + std::string(dcf::cost::kSweepCsvHeader) + ")");

    // gen-data
    auto* gd = app.add_subcommand("gen-data", "Generate a synthetic paired volume/report dataset");
    std::string gd_spec, gd_out;
    gd->add_option("--spec", gd_spec, "Dataset spec JSON")->required();
    gd->add_option("--out", gd_out, "Output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Contrastive training; writes checkpoint.dcf and loss.csv");
    tr->footer(std::string("Run config fields and defaults (unknown keys are rejected):\n") +
               dcf::RunConfig::schema());
    std::string tr_config;
    bool tr_resume = false;
    tr->add_option("--config", tr_config, "Run config JSON")->required();
    tr->add_flag("--resume", tr_resume, "Continue from <output>/checkpoint.dcf");

    // eval-zeroshot
    auto* zs = app.add_subcommand("eval-zeroshot", "Zero-shot classification with present/not-present prompts");
    std::string zs_ckpt, zs_data, zs_split = "val", zs_out;
    zs->add_option("--ckpt", zs_ckpt, "Checkpoint")->required();
    zs->add_option("--data", zs_data, "Dataset directory")->required();
    zs->add_option("--split", zs_split, "train | val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));
    zs->add_option("--out", zs_out, "Write metrics JSON");

    // finetune
    auto* ft = app.add_subcommand("finetune", "Linear BCE head on the frozen image encoder");
    std::string ft_ckpt, ft_data, ft_out, ft_head;
    dcf::FinetuneConfig ft_cfg;
    ft->add_option("--ckpt", ft_ckpt, "Checkpoint")->required();
    ft->add_option("--data", ft_data, "Dataset directory")->required();
    ft->add_option("--epochs", ft_cfg.epochs, "Head training epochs")->capture_default_str();
    ft->add_option("--lr", ft_cfg.lr, "Head learning rate")->capture_default_str();
    ft->add_option("--batch-size", ft_cfg.batch_size, "Head batch size")->capture_default_str();
    ft->add_option("--seed", ft_cfg.seed, "Head init/shuffle seed")->capture_default_str();
    ft->add_option("--out", ft_out, "Write metrics JSON");
    ft->add_option("--head-out", ft_head, "Write the trained head as a checkpoint");

    // retrieve
    auto* rt = app.add_subcommand("retrieve", "Image-to-text and text-to-image Recall@k");
    std::string rt_ckpt, rt_data, rt_k = "1,5,10", rt_split = "val", rt_out;
    rt->add_option("--ckpt", rt_ckpt, "Checkpoint")->required();
    rt->add_option("--data", rt_data, "Dataset directory")->required();
    rt->add_option("--k", rt_k, "Comma list of k")->capture_default_str();
    rt->add_option("--split", rt_split, "train | val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));
    rt->add_option("--out", rt_out, "Write metrics JSON");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite (f64)");
    std::string gc_op, gc_fault, gc_out;
    std::uint64_t gc_seed = 0;
    bool gc_all = false;
    std::string ops_help = "One of:";
    for (const auto& n : dcf::gradcheck::op_names()) ops_help += " " + n;
    auto* op_opt = gc->add_option("--op", gc_op, ops_help);
    gc->add_flag("--all", gc_all, "Run every op (default)")->excludes(op_opt);
    gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();
    gc->add_option("--json", gc_out, "Write per-op results JSON");
    gc->add_option("--inject-fault", gc_fault)->group("");  // hidden: negative control

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        dcf::parallel::set_strict(strict);
        if (*an) return cmd_analyze(an_variant, an_shape, an_csv);
        if (*cc) return cmd_cost_curves(cc_kinds, cc_k, cc_c, cc_dims, cc_csv);
        if (*gd) return cmd_gen_data(gd_spec, gd_out);
        if (*tr) return cmd_train(tr_config, strict, tr_resume);
        if (*zs) {
            emit_json(with_dtype(zs_ckpt, [&](auto t) {
                          return dcf::eval_zeroshot<decltype(t)>(zs_ckpt, zs_data, zs_split);
                      }),
                      zs_out);
            return 0;
        }
        if (*ft) {
            emit_json(with_dtype(ft_ckpt, [&](auto t) {
                          return dcf::eval_finetune<decltype(t)>(ft_ckpt, ft_data, ft_cfg, ft_head);
                      }),
                      ft_out);
            return 0;
        }
        if (*rt) {
            const auto ks = parse_uint_list(rt_k, "--k");
            for (std::size_t k : ks) {
                if (k == 0) throw UsageError("--k values must be >= 1");
            }
            emit_json(with_dtype(rt_ckpt, [&](auto t) {
                          return dcf::eval_retrieval<decltype(t)>(rt_ckpt, rt_data, ks, rt_split);
                      }),
                      rt_out);
            return 0;
        }
        if (*gc) return cmd_gradcheck(gc_op, gc_seed, gc_fault, gc_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const dcf::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const dcf::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

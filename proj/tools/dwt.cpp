// dwt: command-line front end for the distillation-from-weak-teacher lab.
//
// Exit codes: 0 success, 2 malformed config / missing or corrupt input,
// 3 teacher/student incompatibility, 4 numeric abort, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dwt/dwt.hpp"

namespace fs = std::filesystem;
using namespace dwt;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool required = true) {
    auto* opt = cmd->add_option("--config", c.config, "run config JSON");
    if (required) opt->required();
    cmd->add_option("--set", c.overrides, "override a config key, e.g. --set train.total_steps=200");
}

RunConfig load(const Common& c) {
    if (c.config.empty()) {
        json j = json::object();
        for (const auto& o : c.overrides) apply_override(j, o);
        return run_config_from_json(j);
    }
    return load_run_config(c.config, c.overrides);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            out.push_back(std::stoull(part));
        } catch (const std::exception&) {
            throw ConfigError("bad seed list '" + s + "'");
        }
    }
    return out;
}

ModelConfig load_student_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open student config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": malformed JSON: " + e.what());
    }
    // either a bare model config or a full run config
    if (j.contains("student")) return run_config_from_json(j).student;
    return model_config_from_json(j, path);
}

int run(int argc, char** argv) {
    CLI::App app{"Distillation-from-weak-teacher lab"};
    app.require_subcommand(1);

    Common gen_c, pre_c, dis_c, eval_c, probe_c, exp_c, params_c;
    std::string corpus_out;
    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    add_common(gen, gen_c, false);
    gen->add_option("--out", corpus_out, "corpus file (default <out_dir>/corpus.bin)");

    auto* pre = app.add_subcommand("pretrain", "standalone MLM training of the student model");
    add_common(pre, pre_c);

    std::string teacher_path;
    auto* dis = app.add_subcommand("distill", "train the student against a frozen teacher checkpoint");
    add_common(dis, dis_c);
    dis->add_option("--teacher", teacher_path, "teacher checkpoint (overrides teacher_ckpt)");

    std::string remap_teacher, remap_student, remap_mode = "PR", remap_out = ".";
    std::uint64_t remap_seed = 1;
    auto* rem = app.add_subcommand("remap", "initialise a student from a shallower teacher");
    rem->add_option("--teacher", remap_teacher, "teacher checkpoint")->required();
    rem->add_option("--student-config", remap_student, "student model config (or run config) JSON")->required();
    rem->add_option("--mode", remap_mode, "PR or random");
    rem->add_option("--seed", remap_seed, "seed for random mode");
    rem->add_option("--out", remap_out, "output directory");

    std::string eval_ckpt, probe_ckpt;
    auto* ev = app.add_subcommand("eval", "dev MLM loss / accuracy / perplexity of a checkpoint");
    add_common(ev, eval_c, false);
    ev->add_option("--ckpt", eval_ckpt, "checkpoint")->required();

    auto* pr = app.add_subcommand("probe", "frozen-encoder linear probe accuracy of a checkpoint");
    add_common(pr, probe_c, false);
    pr->add_option("--ckpt", probe_ckpt, "checkpoint")->required();

    std::string exp_name, exp_out = "experiments", exp_seeds = "1,2,3";
    bool dry_run = false;
    auto* ex = app.add_subcommand("experiment", "run an ablation harness");
    add_common(ex, exp_c, false);
    ex->add_option("--name", exp_name, "teacher-quality | loss-weight | pr | all")
        ->required()
        ->check(CLI::IsMember({"teacher-quality", "loss-weight", "pr", "all"}));
    ex->add_option("--out", exp_out, "output directory");
    ex->add_option("--seeds", exp_seeds, "comma-separated seeds");
    ex->add_flag("--dry-run", dry_run, "validate and report sizes/layer maps without training");

    auto* pa = app.add_subcommand("params", "print parameter counts for the configured models");
    add_common(pa, params_c, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    if (*gen) {
        const RunConfig rc = load(gen_c);
        const Corpus c = gen_corpus(rc.corpus.generator);
        const fs::path out = corpus_out.empty() ? fs::path(rc.out_dir) / "corpus.bin" : fs::path(corpus_out);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        write_corpus(c, out.string());
        std::cout << "wrote " << c.size() << " tokens to " << out.string() << '\n';
    } else if (*pre) {
        const RunConfig rc = load(pre_c);
        const auto [train, dev] = make_corpora(rc.corpus);
        const TrainResult r = pretrain(rc.student, rc.train, train, dev, fs::path(rc.out_dir));
        std::ofstream(fs::path(rc.out_dir) / "run_config.json") << serialize_run_config(rc);
        std::cout << "final dev loss " << r.metrics.back().dev_loss << " (" << rc.out_dir << ")\n";
    } else if (*dis) {
        RunConfig rc = load(dis_c);
        if (!teacher_path.empty()) rc.teacher_ckpt = teacher_path;
        if (rc.teacher_ckpt.empty()) throw ConfigError("distill needs a teacher checkpoint (--teacher or teacher_ckpt)");
        if (!fs::exists(rc.teacher_ckpt)) throw ConfigError("teacher checkpoint not found: " + rc.teacher_ckpt);
        const Checkpoint teacher = load_checkpoint(rc.teacher_ckpt);
        const auto [train, dev] = make_corpora(rc.corpus);
        const DistillRun r =
            distill_train(rc.student, teacher, rc.distill, rc.train, train, dev, rc.init_mode, fs::path(rc.out_dir));
        std::ofstream(fs::path(rc.out_dir) / "run_config.json") << serialize_run_config(rc);
        std::cout << "final dev loss " << r.result.metrics.back().dev_loss << " (" << rc.out_dir << ")\n";
    } else if (*rem) {
        if (!fs::exists(remap_teacher)) throw ConfigError("teacher checkpoint not found: " + remap_teacher);
        const Checkpoint teacher = load_checkpoint(remap_teacher);
        const ModelConfig student = load_student_config(remap_student);
        const RemapResult r = remap_init(teacher, student, parse_init_mode(remap_mode), remap_seed);
        fs::create_directories(remap_out);
        save_checkpoint(r.checkpoint, fs::path(remap_out) / "init.dwtc");
        std::ofstream(fs::path(remap_out) / "remap_report.json") << to_json(r.report).dump(2) << '\n';
        std::cout << "wrote " << (fs::path(remap_out) / "init.dwtc").string() << " and remap_report.json\n";
    } else if (*ev) {
        const RunConfig rc = load(eval_c);
        if (!fs::exists(eval_ckpt)) throw ConfigError("checkpoint not found: " + eval_ckpt);
        const Checkpoint ckpt = load_checkpoint(eval_ckpt);
        const auto [train, dev] = make_corpora(rc.corpus);
        const EvalMetrics m = evaluate(ckpt, dev, rc.train);
        std::cout << json{{"dev_loss", m.loss}, {"dev_acc", m.accuracy}, {"ppl", m.perplexity}}.dump() << '\n';
    } else if (*pr) {
        const RunConfig rc = load(probe_c);
        if (!fs::exists(probe_ckpt)) throw ConfigError("checkpoint not found: " + probe_ckpt);
        const Checkpoint ckpt = load_checkpoint(probe_ckpt);
        const auto [train, dev] = make_corpora(rc.corpus);
        const ProbeTask task = gen_probe_task(train, rc.probe.task);
        std::cout << json{{"probe_acc", probe_downstream(ckpt, task, rc.probe.fit)}}.dump() << '\n';
    } else if (*ex) {
        ExperimentOptions o;
        o.base = load(exp_c);
        o.seeds = parse_seeds(exp_seeds);
        o.dry_run = dry_run;
        Lab lab(exp_out);
        auto one = [&](const std::string& name, auto fn) {
            o.out = fs::path(exp_out) / name;
            const ExperimentReport rep = fn(lab, o);
            write_report(rep, o.out);
            for (const auto& c : rep.checks) {
                std::cout << name << ": [" << (c.pass ? "pass" : "warn") << "] " << c.claim << " (" << c.detail
                          << ")\n";
            }
            std::cout << name << ": wrote " << o.out.string() << '\n';
        };
        if (exp_name == "teacher-quality" || exp_name == "all") one("teacher_quality", experiment_teacher_quality);
        if (exp_name == "loss-weight" || exp_name == "all") one("loss_weight", experiment_loss_weight);
        if (exp_name == "pr" || exp_name == "all") one("parameter_remapping", experiment_pr);
    } else if (*pa) {
        const RunConfig rc = load(params_c);
        json j{{"student", num_params(rc.student)}};
        if (rc.teacher) {
            j["teacher"] = num_params(*rc.teacher);
            j["ratio"] = static_cast<double>(num_params(*rc.teacher)) / static_cast<double>(num_params(rc.student));
        }
        std::cout << j.dump() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const IncompatibilityError& e) {
        std::cerr << "incompatible: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

// One line per acceptance criterion; exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include "dwt/experiments.hpp"
#include "support/fd.hpp"

namespace fs = std::filesystem;
using namespace dwt;
using dwt::testing::random_stochastic;
using dwt::testing::random_tensor;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

class Checker {
public:
    Verdict* v;
    std::ostringstream msg;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            v->pass = false;
            msg << (msg.tellp() > 0 ? "; " : "") << "FAILED " << what;
        }
    }
};

// ---- independent oracles: direct evaluation, no max shift, f64 ----

std::vector<double> softmax_oracle(const std::vector<double>& z, double tau) {
    std::vector<double> e(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp(z[i] / tau));
    for (double& x : e) x /= s;
    return e;
}

double ce_oracle(const std::vector<double>& z, std::size_t target) {
    double s = 0.0;
    for (double x : z) s += std::exp(x);
    return std::log(s) - z[target];
}

double kl_oracle(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
    }
    return s;
}

template <typename T>
Tensor<T> as(const Tensor<double>& t) {
    std::vector<T> v(t.values().begin(), t.values().end());
    return Tensor<T>(t.shape(), std::move(v));
}

// max |impl - oracle| over 100 rows of C = 10 for one precision
template <typename T>
double loss_oracle_error(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> tau_d(0.5, 4.0);
    std::uniform_int_distribution<std::size_t> tgt(0, 9);
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) {
        const Tensor<T> z = as<T>(random_tensor({1, 10}, rng, 3.0));
        const std::vector<double> zd(z.values().begin(), z.values().end());
        const double tau = tau_d(rng);
        const std::size_t t = tgt(rng);

        const Tensor<T> p = softmax_temperature(z, tau);
        const auto pref = softmax_oracle(zd, tau);
        for (std::size_t i = 0; i < 10; ++i) worst = std::max(worst, std::abs(double(p[i]) - pref[i]));

        Graph<T> g;
        const double ce = double(cross_entropy(log_softmax(g.leaf(z), 1.0), std::vector<std::size_t>{t}).value().item());
        worst = std::max(worst, std::abs(ce - ce_oracle(zd, t)));

        const Tensor<T> pt = as<T>(random_stochastic(1, 10, rng));
        const Tensor<T> ps = as<T>(random_stochastic(1, 10, rng));
        const double kl = double(kl_divergence(pt, g.leaf(ps)).loss.value().item());
        const std::vector<double> ptd(pt.values().begin(), pt.values().end());
        const std::vector<double> psd(ps.values().begin(), ps.values().end());
        worst = std::max(worst, std::abs(kl - kl_oracle(ptd, psd)));
    }
    return worst;
}

Verdict c1_loss_oracles() {
    Verdict v;
    Checker ck{&v, {}};
    const double e64 = loss_oracle_error<double>(101);
    const double e32 = loss_oracle_error<float>(101);
    ck.require(e64 < 1e-10, "f64 bound");
    ck.require(e32 < 1e-5, "f32 bound");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << "max abs err f64 " << e64 << " (< 1e-10), f32 " << e32
           << " (< 1e-5), 100 cases C=10";
    v.detail = ck.msg.str();
    return v;
}

ModelConfig micro_model() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.ffn = 16;
    c.vocab = 16;
    c.max_positions = 8;
    return c;
}

Corpus micro_corpus() {
    CorpusParams p;
    p.vocab = 16;
    p.length = 4000;
    p.order = 1;
    p.seed = 3;
    return gen_corpus(p);
}

Verdict c2_gradients() {
    Verdict v;
    const ModelConfig c = micro_model();
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 0.1);
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs;
    // perturb so zero-initialised biases and unit gains carry generic values
    for (auto& [name, t] : init_random<double>(c, 11)) {
        for (double& x : t.values()) x += nd(rng);
        names.push_back(name);
        inputs.push_back(t);
    }
    const MlmBatch b = make_mlm_batch(micro_corpus(), 2, 6, 0.5, 3, 0);
    const Tensor<double> teacher = random_tensor({b.num_masked(), c.vocab}, rng, 1.5);
    DistillConfig dc;
    dc.alpha_s = Schedule::linear_decay(4.0, 1.0);
    dc.tau = 2.0;
    auto f = [&](Graph<double>& g, const std::vector<Var<double>>& vars) {
        BoundParams<double> bound;
        for (std::size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], vars[i]);
        return dwt_loss(forward_mlm(g, bound, c, b), teacher, b.labels, dc, 3, 10).combined;
    };
    const auto rep = dwt::testing::check_gradients(inputs, f, 1e-5, 20, 17);
    std::size_t expected = 0;
    for (const auto& t : inputs) expected += std::min<std::size_t>(20, t.size());
    v.pass = rep.max_rel < 1e-3 && rep.checked == expected;
    std::ostringstream s;
    s << "max rel err " << rep.max_rel << " (< 1e-3) over " << rep.checked << " entries in " << inputs.size()
      << " tensors, L2 d8 h2 V16 S6";
    v.detail = s.str();
    return v;
}

Verdict c3_kl_properties() {
    Verdict v;
    Checker ck{&v, {}};
    std::mt19937_64 rng(13);
    double min_kl = INFINITY, max_same = 0.0;
    for (int i = 0; i < 1000; ++i) {
        Graph<double> g;
        const auto p = random_stochastic(1, 10, rng);
        const auto q = random_stochastic(1, 10, rng);
        min_kl = std::min(min_kl, kl_divergence(p, g.leaf(q)).loss.value().item());
        max_same = std::max(max_same, std::abs(kl_divergence(p, g.leaf(p)).loss.value().item()));
    }
    ck.require(min_kl >= 0.0, "nonnegativity");
    ck.require(max_same == 0.0, "identity");

    // teacher logits enter as a plain tensor; only the student leaf may get a gradient
    Graph<double> g;
    const Tensor<double> teacher = random_tensor({4, 10}, rng, 2.0);
    const Var<double> s = g.leaf(random_tensor({4, 10}, rng, 2.0), true);
    const auto loss = dwt_loss(s, teacher, std::vector<std::size_t>{1, 2, 3, 4}, DistillConfig{}, 0, 1);
    const auto grads = g.backward(loss.soft);
    ck.require(grads.size() == 1 && grads.count(s.id) == 1, "teacher detach");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << "min KL " << min_kl << " over 1000 pairs, identical-pair max "
           << max_same << ", gradient map holds " << grads.size() << " tensor (student only)";
    v.detail = ck.msg.str();
    return v;
}

TrainConfig micro_train(std::size_t steps) {
    TrainConfig t;
    t.total_steps = steps;
    t.batch = 4;
    t.seq_len = 8;
    t.peak_lr = 3e-3;
    t.eval_every = 5;
    t.eval_batches = 4;
    return t;
}

Verdict c4_degeneracy() {
    Verdict v;
    const auto [train, dev] = train_dev_split(micro_corpus(), 0.1);
    const TrainConfig tc = micro_train(10);
    ModelConfig tcfg = micro_model();
    tcfg.layers = 1;
    const Checkpoint teacher = pretrain(tcfg, tc, train, dev).checkpoint;
    DistillConfig dc;
    dc.alpha_s = Schedule::constant(0.0);
    const auto d = distill_train(micro_model(), teacher, dc, tc, train, dev, InitMode::Random);
    const auto p = pretrain(micro_model(), tc, train, dev);
    bool rows_equal = d.result.metrics.size() == p.metrics.size();
    for (std::size_t i = 0; rows_equal && i < p.metrics.size(); ++i) {
        rows_equal = d.result.metrics[i].hard == p.metrics[i].hard && d.result.metrics[i].dev_loss == p.metrics[i].dev_loss;
    }
    const bool params_equal = d.result.checkpoint.params == p.checkpoint.params;
    v.pass = rows_equal && params_equal;
    v.detail = std::string("alpha_s=0 vs pretrain, 10 steps: parameters ") + (params_equal ? "bit-identical" : "DIFFER") +
               ", metric rows " + (rows_equal ? "bit-identical" : "DIFFER");
    return v;
}

ModelConfig bert_like(std::size_t layers) {
    ModelConfig c;
    c.layers = layers;
    c.hidden = 768;
    c.heads = 12;
    c.ffn = 3072;
    c.vocab = 30522;
    c.max_positions = 512;
    c.tie_mlm_head = true;
    return c;
}

Verdict c5_param_counts() {
    Verdict v;
    const double s = static_cast<double>(num_params(bert_like(6)));
    const double r4 = num_params(bert_like(4)) / s, r2 = num_params(bert_like(2)) / s, r1 = num_params(bert_like(1)) / s;
    v.pass = std::abs(s / 1e6 - 67.0) <= 1.0 && std::abs(r4 - 0.78) <= 0.02 && std::abs(r2 - 0.57) <= 0.02 &&
             std::abs(r1 - 0.46) <= 0.02;
    std::ostringstream o;
    o.precision(4);
    o << "student " << s / 1e6 << "M (67M +-1M), ratios L4 " << r4 << " L2 " << r2 << " L1 " << r1
      << " (0.78/0.57/0.46 +-0.02)";
    v.detail = o.str();
    return v;
}

Verdict c6_remap() {
    Verdict v;
    Checker ck{&v, {}};
    const auto map = build_layer_map(4, 6).mapping;
    ck.require(map == std::vector<std::size_t>{0, 1, 2, 3, 3, 3}, "layer map");

    ModelConfig tcfg;
    tcfg.layers = 4;
    tcfg.hidden = 16;
    tcfg.heads = 2;
    tcfg.ffn = 32;
    tcfg.vocab = 24;
    tcfg.max_positions = 16;
    const Checkpoint teacher{tcfg, json::object(), init_random<float>(tcfg, 9)};
    ModelConfig scfg = tcfg;
    scfg.layers = 6;
    const RemapResult r = remap_init(teacher, scfg, InitMode::PR, 1);
    std::size_t checked = 0, mismatched = 0;
    for (const auto& e : r.report.entries) {
        // recompute both hashes from the tensors, not from the report
        const bool ok = !e.source.empty() &&
                        tensor_hash(teacher.params.at(e.source)) == tensor_hash(r.checkpoint.params.at(e.destination)) &&
                        teacher.params.at(e.source) == r.checkpoint.params.at(e.destination);
        mismatched += ok ? 0 : 1;
        ++checked;
    }
    ck.require(mismatched == 0 && checked == r.checkpoint.params.size(), "copied tensors hash-equal");

    CorpusParams cp;
    cp.vocab = 24;
    cp.length = 3000;
    const MlmBatch b = make_mlm_batch(gen_corpus(cp), 4, 12, 0.25, 1, 0);
    const RemapResult same = remap_init(teacher, tcfg, InitMode::PR, 1);
    ck.require(mlm_logits(same.checkpoint.params, tcfg, b) == mlm_logits(teacher.params, tcfg, b), "equal-depth logits");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << "map(4,6) = [0,1,2,3,3,3]; " << checked << " tensors hash-equal to "
           << "their sources; equal-depth PR logits bit-identical";
    v.detail = ck.msg.str();
    return v;
}

Verdict c7_schedules() {
    Verdict v;
    Checker ck{&v, {}};
    const Schedule s = Schedule::linear_decay(4, 1);
    ck.require(schedule_value(s, 0, 100) == 4.0 && schedule_value(s, 100, 100) == 1.0 && schedule_value(s, 50, 100) == 2.5,
               "linear_decay endpoints/midpoint");

    TrainConfig tc;
    tc.total_steps = 1000;
    std::size_t argmax = 0;
    double peak = 0.0;
    for (std::size_t i = 0; i <= tc.total_steps; ++i) {
        if (lr_at(i, tc) > peak) peak = lr_at(i, tc), argmax = i;
    }
    ck.require(peak == 5e-4 && argmax == 50, "lr peak 5e-4 at 5%");

    // f(x, y) = (x - 1)^2 + 10 (y + 2)^2
    ParamSet<float> p{{"x", Tensor<float>(Shape{2}, {4.0f, 3.0f})}};
    AdamState st;
    for (int i = 0; i < 200; ++i) {
        const float x = p.at("x")[0], y = p.at("x")[1];
        adam_step(p, ParamSet<float>{{"x", Tensor<float>(Shape{2}, {2 * (x - 1), 20 * (y + 2)})}}, st, 0.1);
    }
    const float x = p.at("x")[0], y = p.at("x")[1];
    const double loss = (x - 1) * (x - 1) + 10 * (y + 2) * (y + 2);
    ck.require(loss < 1e-3, "Adam quadratic");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << "linear_decay(4,1) = 4/2.5/1 at 0/50%/100%; lr peak " << peak
           << " at step " << argmax << "/1000; Adam quadratic loss " << loss << " after 200 steps (< 1e-3)";
    v.detail = ck.msg.str();
    return v;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Verdict c8_determinism(const fs::path& work) {
    Verdict v;
    CorpusParams cp;
    cp.vocab = 24;
    cp.length = 20000;
    cp.order = 1;
    cp.sharpness = 0.1;
    cp.seed = 3;
    const auto [train, dev] = train_dev_split(gen_corpus(cp), 0.1);
    ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.vocab = 24;
    c.max_positions = 16;
    TrainConfig tc = micro_train(50);
    tc.seq_len = 16;
    tc.eval_every = 10;
    tc.checkpoint_every = 25;
    ModelConfig tcfg = c;
    tcfg.layers = 1;
    const Checkpoint teacher = pretrain(tcfg, tc, train, dev).checkpoint;
    DistillConfig dc;
    dc.alpha_s = Schedule::linear_decay(4, 1);
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    for (const char* run : {"a", "b"}) distill_train(c, teacher, dc, tc, train, dev, InitMode::PR, root / run);
    std::size_t files = 0, differing = 0;
    for (const auto& e : fs::directory_iterator(root / "a")) {
        const auto name = e.path().filename();
        ++files;
        if (!fs::exists(root / "b" / name) || slurp(e.path()) != slurp(root / "b" / name)) ++differing;
    }
    const bool core = fs::exists(root / "a" / "metrics.csv") && fs::exists(root / "a" / "ckpt_50.dwtc");
    v.pass = core && differing == 0;
    v.detail = std::to_string(files) + " files per 50-step distill run (metrics.csv, ckpt_25/50.dwtc, remap report), " +
               std::to_string(differing) + " differ";
    return v;
}

Verdict c9_harnesses(const fs::path& config, const fs::path& work) {
    Verdict v;
    Checker ck{&v, {}};
    const RunConfig base = load_run_config(config);
    const auto& g = base.corpus.generator;
    ck.require(g.vocab == 64 && g.length >= 150000 && g.length <= 250000 && base.student.layers == 6 &&
                   base.student.hidden == 64 && base.train.total_steps <= 2000,
               "desk settings");

    const std::clock_t cpu0 = std::clock();
    ExperimentOptions o;
    o.base = base;
    o.out = work / "experiments";
    fs::remove_all(o.out);
    Lab lab(o.out, nullptr);
    using Fn = ExperimentReport (*)(Lab&, const ExperimentOptions&);
    const std::pair<const char*, Fn> harnesses[] = {{"teacher_quality", experiment_teacher_quality},
                                                     {"loss_weight", experiment_loss_weight},
                                                     {"parameter_remapping", experiment_pr}};
    const std::size_t expected_rows[] = {4 * 3, 4 * 3, 3 * 3};
    std::size_t passes = 0, warns = 0, i = 0;
    std::ostringstream directions;
    for (const auto& [name, fn] : harnesses) {
        const ExperimentReport rep = fn(lab, o);
        write_report(rep, o.out / name);
        bool complete = rep.rows.size() == expected_rows[i] && !rep.checks.empty();
        for (const auto& r : rep.rows) complete = complete && std::isfinite(r.final_dev_loss) && std::isfinite(r.probe_acc);
        for (const char* f : {"results.csv", "summary.json", "manifest.json"}) complete = complete && fs::exists(o.out / name / f);
        ck.require(complete, std::string(name) + " complete");
        for (const auto& c : rep.checks) {
            (c.pass ? passes : warns)++;
            directions << "\n    " << (c.pass ? "[pass] " : "[warn] ") << name << ": " << c.claim << " (" << c.detail << ")";
        }
        ++i;
    }
    const double cpu_min = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC / 60.0;
    ck.require(cpu_min <= 30.0, "CPU budget");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << "3 harnesses x 3 seeds complete, V=" << g.vocab << " tokens=" << g.length
           << " L" << base.student.layers << " d" << base.student.hidden << " steps=" << base.train.total_steps
           << ", CPU " << cpu_min << " min (<= 30); directions " << passes << " pass / " << warns << " warn"
           << directions.str();
    v.detail = ck.msg.str();
    return v;
}

Verdict c10_checkpoint() {
    Verdict v;
    Checker ck{&v, {}};
    ModelConfig c = micro_model();
    const Checkpoint ckpt{c, json{{"step", 7}}, init_random<float>(c, 4)};
    const auto bytes = serialize_checkpoint(ckpt);
    ck.require(serialize_checkpoint(parse_checkpoint(bytes)) == bytes, "byte-identical round trip");

    auto rejected = [&](std::vector<std::uint8_t> b, const std::string& needle) {
        try {
            parse_checkpoint(b, "probe.dwtc");
        } catch (const FormatError& e) {
            return std::string(e.what()).find(needle) != std::string::npos;
        }
        return false;
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    ck.require(rejected(bad_magic, "magic"), "corrupt magic");

    const std::uint64_t hlen = detail::get_le(bytes, 8, 8);
    json h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    h["tensors"][2]["offset"] = h["tensors"][2]["offset"].get<std::uint64_t>() + 4;
    const std::string text = h.dump();
    std::vector<std::uint8_t> bad_offset(bytes.begin(), bytes.begin() + 8);
    detail::put_u64(bad_offset, text.size());
    bad_offset.insert(bad_offset.end(), text.begin(), text.end());
    bad_offset.insert(bad_offset.end(), bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen), bytes.end());
    ck.require(rejected(bad_offset, "offset"), "corrupt offset");
    ck.require(rejected(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4), "past end"), "truncated payload");
    ck.msg << (ck.msg.tellp() > 0 ? "; " : "") << bytes.size()
           << "-byte checkpoint round-trips byte-identically; corrupt magic, shifted offset and truncated payload "
              "rejected with FormatError naming the fault";
    v.detail = ck.msg.str();
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work_dir = (fs::temp_directory_path() / "dwt_acceptance").string();
    std::string config;
    bool skip_harness = false;
    app.add_option("--work-dir", work_dir, "scratch directory for runs");
    app.add_option("--config", config, "desk-scale run config for the experiment harnesses")->required();
    app.add_flag("--skip-harness", skip_harness, "report the harness criterion as failed without running it");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work_dir);

    struct Criterion {
        int id;
        const char* name;
        double budget_s;  // stated runtime bound; 0 = none beyond the CPU bound checked inside
        std::function<Verdict()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "loss-oracle equivalence", 1, c1_loss_oracles},
        {2, "gradient correctness", 30, c2_gradients},
        {3, "KL properties", 1, c3_kl_properties},
        {4, "zero soft weight degeneracy", 10, c4_degeneracy},
        {5, "parameter-count ratios", 1, c5_param_counts},
        {6, "remapping invariants", 5, c6_remap},
        {7, "schedule/optimizer contracts", 1, c7_schedules},
        {8, "determinism", 60, [&] { return c8_determinism(work_dir); }},
        {9, "experiment harnesses", 0,
         [&] {
             if (skip_harness) return Verdict{false, "skipped"};
             return c9_harnesses(config, work_dir);
         }},
        {10, "checkpoint round-trip", 1, c10_checkpoint},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = Verdict{false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0 && secs >= c.budget_s) {
            v.pass = false;
            v.detail += "; runtime over " + std::to_string(c.budget_s) + " s";
        }
        failures += v.pass ? 0 : 1;
        std::cout << (v.pass ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": " << c.name << " - " << v.detail
                  << " [" << secs << " s]" << std::endl;
    }
    std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failures == 0 ? 0 : 1;
}

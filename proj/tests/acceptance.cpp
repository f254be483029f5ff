// Acceptance checks: one PASS/FAIL line per criterion. Exit status is
// nonzero when any criterion fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "chargescope/countermeasures.hpp"
#include "chargescope/eval.hpp"
#include "chargescope/experiment.hpp"
#include "chargescope/nn.hpp"
#include "chargescope/preprocess.hpp"
#include "chargescope/random.hpp"
#include "chargescope/simulator.hpp"

namespace fs = std::filesystem;
using namespace chargescope;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
}

void progress(const std::string& msg) {
    std::cerr << "  .. " << msg << '\n';
}

std::string pct(double fraction) { return format_percent(fraction); }

TraceSet prefix(const TraceSet& set, double seconds) {
    TraceSet cut;
    cut.class_names = set.class_names;
    for (const auto& t : set.traces) cut.traces.push_back(slice_prefix(t, seconds));
    return cut;
}

std::uint64_t split_seed_of(const ExperimentConfig& c) { return derive_seed(c.seed, 1); }

AttackReport train_and_test(const ExperimentConfig& c, const TraceSet& set, const DatasetSplit& sp,
                            TrainedClassifier* keep = nullptr) {
    auto model = train_classifier(c, set, sp.train, sp.val);
    auto r = evaluate_classifier(c, model, set, sp.test);
    if (keep) *keep = std::move(model);
    return r;
}

/// Independent ranking oracle: classes sorted by a full comparison key.
std::vector<int> oracle_rank(const std::vector<std::size_t>& counts, const std::vector<double>& conf) {
    std::vector<int> idx(counts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
        if (counts[ua] != counts[ub]) return counts[ua] > counts[ub];
        if (conf[ua] != conf[ub]) return conf[ua] > conf[ub];
        return a < b;
    });
    return idx;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    fs::path out = fs::temp_directory_path() / "chargescope_acceptance";
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--out") out = argv[i + 1];
    fs::remove_all(out);
    fs::create_directories(out);

    const ExperimentConfig desk = desk_config();
    const std::vector<double> sweep{4.0, 5.0, 6.0};
    const double longest = sweep.back();

    // Shared desk-scale material: one dataset at the longest sweep duration,
    // whose 2.5 s prefix is the base attack dataset.
    std::optional<TraceSet> long_set;
    std::optional<DatasetSplit> base_split;
    std::optional<TrainedClassifier> base_model;
    std::optional<AttackReport> base_report;
    auto ensure_base = [&] {
        if (base_report) return;
        SimConfig sim = desk.sim;
        sim.duration_s = longest;
        progress("simulating desk dataset");
        long_set = synth_dataset(sim);
        base_split = split_dataset(*long_set, desk.split_ratios, split_seed_of(desk));
        progress("training desk model");
        TrainedClassifier m;
        base_report = train_and_test(desk, prefix(*long_set, desk.sim.duration_s), *base_split, &m);
        base_model = std::move(m);
    };

    report(1, "desk-scale attack", [&] {
        ensure_base();
        const auto& r = *base_report;
        return Outcome{r.rank1_acc >= 0.80 && r.rank2_acc >= r.rank1_acc,
                       "rank1=" + pct(r.rank1_acc) + " rank2=" + pct(r.rank2_acc) +
                           " (need rank1>=80.0%, rank2>=rank1)"};
    });

    report(2, "no leakage below the coupling ramp", [&] {
        ExperimentConfig c = desk;
        c.sim.soc = {0.5};
        progress("soc 0.5 attack");
        const auto set = synth_dataset(c.sim);
        const auto r = train_and_test(c, set, split_dataset(set, c.split_ratios, split_seed_of(c)));
        return Outcome{r.rank1_acc <= 0.15, "soc=0.5 rank1=" + pct(r.rank1_acc) + " (need <=15.0%)"};
    });

    report(3, "cross-device transfer", [&] {
        ensure_base();
        SimConfig sim = desk.sim;
        sim.device = builtin_device(desk.test_device);
        sim.noise_seed = derive_seed(desk.sim.noise_seed, 1);
        progress("evaluating " + desk.train_device + " model on " + desk.test_device);
        const auto other = synth_dataset(sim);
        const auto r = evaluate_classifier(desk, *base_model, other, base_split->test);
        return Outcome{r.rank1_acc <= 0.15, desk.train_device + "->" + desk.test_device +
                                                " rank1=" + pct(r.rank1_acc) + " (need <=15.0%)"};
    });

    report(4, "cross-charger transfer", [&] {
        ExperimentConfig c = desk;
        c.sim.classes = 10;
        c.model.n_classes = 10;
        SimConfig wl = c.sim, wd = c.sim;
        wl.channel = Channel::wireless;
        wd.channel = Channel::wired;
        wd.noise_seed = derive_seed(c.sim.noise_seed, 2);
        const auto a = synth_dataset(wl);
        const auto b = synth_dataset(wd);
        const auto sp = split_dataset(a, c.split_ratios, split_seed_of(c));
        progress("training wireless model");
        TrainedClassifier ma, mb;
        const auto aa = train_and_test(c, a, sp, &ma);
        const auto ab = evaluate_classifier(c, ma, b, sp.test);
        progress("training wired model");
        const auto bb = train_and_test(c, b, sp, &mb);
        const auto ba = evaluate_classifier(c, mb, a, sp.test);
        const bool ok = ab.rank1_acc > 0.30 && ba.rank1_acc > 0.30 && ab.rank1_acc < aa.rank1_acc &&
                        ba.rank1_acc < bb.rank1_acc;
        return Outcome{ok, "wireless->wired=" + pct(ab.rank1_acc) + " (same " + pct(aa.rank1_acc) +
                               ") wired->wireless=" + pct(ba.rank1_acc) + " (same " + pct(bb.rank1_acc) +
                               ") (need >30.0% and below same-charger)"};
    });

    report(5, "longer traces do not hurt", [&] {
        ensure_base();
        double best = 0.0;
        std::string detail = "2.5s=" + pct(base_report->rank1_acc);
        for (double d : sweep) {
            std::ostringstream label;
            label << d << "s";
            progress("duration " + label.str());
            const auto r = train_and_test(desk, prefix(*long_set, d), *base_split);
            best = std::max(best, r.rank1_acc);
            detail += " " + label.str() + "=" + pct(r.rank1_acc);
        }
        return Outcome{base_report->rank1_acc <= best + 0.05, detail + " (need 2.5s <= max + 5.0pp)"};
    });

    report(6, "content drift degrades the attack", [&] {
        ensure_base();
        SimConfig aged = desk.sim;
        aged.drift = 0.8;
        progress("re-synthesizing drifted test traces");
        const auto sigs = dataset_signatures(aged);
        TraceSet test = prefix(*long_set, desk.sim.duration_s);
        for (auto i : base_split->test) {
            const auto cls = static_cast<int>(i) / aged.traces_per_class;
            const auto j = static_cast<int>(i) % aged.traces_per_class;
            test.traces[i] = synth_trace(sigs[static_cast<std::size_t>(cls)], aged,
                                         derive_seed(aged.noise_seed, i), aged.soc_for_trace(j));
        }
        const auto r = evaluate_classifier(desk, *base_model, test, base_split->test);
        const double drop = base_report->rank1_acc - r.rank1_acc;
        return Outcome{drop >= 0.30 && r.rank1_acc >= 0.10,
                       "fresh=" + pct(base_report->rank1_acc) + " drift0.8=" + pct(r.rank1_acc) +
                           " (need drop>=30.0pp and >=10.0%)"};
    });

    report(7, "gradient check", [&] {
        std::mt19937_64 rng(7);
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto pick = [&](std::size_t lo, std::size_t hi) {
            return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
        };
        double worst = 0.0;
        std::string where;
        const int configs = 6;
        for (int k = 0; k < configs; ++k) {
            nn::ModelConfig m;
            m.conv_filters = {pick(2, 5), pick(2, 5), pick(2, 5)};
            m.kernel = pick(2, 4);
            m.lstm_units = pick(2, 5);
            m.dense_units = pick(2, 5);
            m.n_classes = pick(2, 4);
            m.dropout = 0.5;
            const std::size_t slice_len = pick(36, 48);
            auto params = nn::init_params<double>(m, slice_len, rng());
            for (auto& t : params.tensors)
                for (auto& v : t.values) v += 0.05 * gauss(rng);
            std::vector<SlicedSegment> inputs(pick(2, 4));
            std::vector<nn::LabeledRef> batch;
            for (std::size_t b = 0; b < inputs.size(); ++b) {
                inputs[b].n_slices = m.n_slices;
                inputs[b].slice_len = slice_len;
                inputs[b].values.resize(m.n_slices * slice_len);
                for (auto& v : inputs[b].values) v = gauss(rng);
                batch.push_back({&inputs[b], static_cast<int>(pick(0, m.n_classes - 1))});
            }
            for (auto mode : {nn::Mode::infer, nn::Mode::train}) {
                const auto r = nn::gradient_check(params, batch, mode, rng());
                if (r.max_relative_error > worst) {
                    worst = r.max_relative_error;
                    where = r.worst_parameter;
                }
            }
        }
        std::ostringstream s;
        s << configs << " configs x 2 modes, max relative error " << worst << " at " << where
          << " (need <1e-4)";
        return Outcome{worst < 1e-4, s.str()};
    });

    report(8, "vote aggregation", [&] {
        std::mt19937_64 rng(8);
        int mismatches = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            const auto classes = std::uniform_int_distribution<std::size_t>(2, 20)(rng);
            const auto windows = std::uniform_int_distribution<std::size_t>(1, 80)(rng);
            std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
            std::vector<SegmentPrediction> preds;
            std::vector<std::size_t> counts(classes, 0);
            std::vector<double> conf(classes, 0.0);
            for (std::size_t w = 0; w < windows; ++w) {
                SegmentPrediction p;
                p.probabilities.resize(classes);
                for (auto& v : p.probabilities) v = std::uniform_int_distribution<int>(0, 4)(rng) * 0.25;
                p.label = pick(rng);
                for (std::size_t c = 0; c < classes; ++c) conf[c] += p.probabilities[c];
                ++counts[static_cast<std::size_t>(p.label)];
                preds.push_back(std::move(p));
            }
            const auto expected = oracle_rank(counts, conf);
            auto result = trace_result(tally_votes(preds, 0, pick(rng)));
            const auto truth = *result.true_label;
            const auto pos = static_cast<std::size_t>(std::find(expected.begin(), expected.end(), truth) -
                                                      expected.begin());
            const std::vector<TraceResult> one{result};
            if (result.ranking != expected || rank_k_accuracy(one, 1) != (pos < 1 ? 1.0 : 0.0) ||
                rank_k_accuracy(one, 2) != (pos < 2 ? 1.0 : 0.0))
                ++mismatches;
        }

        std::uniform_int_distribution<int> guess(0, 19);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<TraceResult> random_results;
        for (int t = 0; t < 20000; ++t) {
            std::vector<SegmentPrediction> preds;
            for (int w = 0; w < 16; ++w) {
                SegmentPrediction p;
                p.probabilities.resize(20);
                for (auto& v : p.probabilities) v = u(rng);
                p.label = guess(rng);
                preds.push_back(std::move(p));
            }
            random_results.push_back(trace_result(tally_votes(preds, static_cast<std::size_t>(t), guess(rng))));
        }
        const double r1 = rank_k_accuracy(random_results, 1);
        const double r2 = rank_k_accuracy(random_results, 2);
        std::ostringstream s;
        s << mismatches << "/1000 oracle mismatches; random guessing rank1=" << pct(r1) << " rank2=" << pct(r2)
          << " (need 0 mismatches, 5.0%/10.0% +-1.0pp)";
        return Outcome{mismatches == 0 && std::abs(r1 - 0.05) <= 0.01 && std::abs(r2 - 0.10) <= 0.01, s.str()};
    });

    report(9, "windowing and shape algebra", [&] {
        const auto full = full_config();
        const auto plan = plan_windows(7000, 700, full.window_s, full.overlap);
        const CurrentTrace trace(std::vector<double>(7000, 1.0), 700, 0, TraceMeta{});
        const auto windows = sliding_windows(trace, full.window_s, full.overlap);
        const auto sliced = slice_segment(windows.front(), full.model.n_slices);
        const auto shapes = nn::shape_plan(full.model, sliced.slice_len);
        std::vector<std::size_t> chain;
        for (const auto& l : shapes.layers) chain.push_back(l.length);
        const std::vector<std::size_t> expected{229, 114, 110, 55, 51, 25};
        std::ostringstream s;
        s << "windows=" << plan.count << "/" << windows.size() << " slice=" << sliced.slice_len << " chain=";
        for (std::size_t i = 0; i < chain.size(); ++i) s << (i ? "/" : "") << chain[i];
        s << " (need 371, 233, 229/114/110/55/51/25)";
        return Outcome{plan.count == 371 && windows.size() == 371 && sliced.slice_len == 233 && chain == expected,
                       s.str()};
    });

    report(10, "low-pass countermeasure filter", [&] {
        const auto taps = design_lowpass(60.0, 700.0);
        const double pass = fir_magnitude(taps, 11.0, 700.0);
        const double stop_db = 20.0 * std::log10(fir_magnitude(taps, 200.0, 700.0));
        std::mt19937_64 rng(10);
        std::normal_distribution<double> g(0.0, 200.0);
        std::vector<double> x(3000), y(3000), mix(3000);
        const double a = 1.7, b = -0.4;
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = g(rng);
            y[i] = g(rng);
            mix[i] = a * x[i] + b * y[i];
        }
        const auto fx = fir_filter_zero_delay(x, taps), fy = fir_filter_zero_delay(y, taps);
        const auto fm = fir_filter_zero_delay(mix, taps);
        double lin = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) lin = std::max(lin, std::abs(fm[i] - (a * fx[i] + b * fy[i])));
        std::ostringstream s;
        s << "|H(11Hz)|=" << pass << " H(200Hz)=" << stop_db << " dB linearity error " << lin
          << " (need within 1%, <=-40 dB, <=1e-9)";
        return Outcome{std::abs(pass - 1.0) <= 0.01 && stop_db <= -40.0 && lin <= 1e-9, s.str()};
    });

    report(11, "trace-level split", [&] {
        SimConfig sim = full_config().sim;
        sim.duration_s = 1.5;
        const auto set = synth_dataset(sim);
        const auto sp = split_dataset(set, {0.64, 0.16, 0.20}, 11);
        auto parents = [&](const std::vector<std::size_t>& idx) {
            std::set<std::size_t> ids;
            for (auto i : idx)
                for (const auto& w : sliding_windows(set.traces[i], 1.0, 0.975, i)) ids.insert(w.parent_trace_id);
            return ids;
        };
        const auto tr = parents(sp.train), va = parents(sp.val), te = parents(sp.test);
        std::size_t shared = 0;
        for (auto id : te) shared += tr.count(id) + va.count(id);
        for (auto id : va) shared += tr.count(id);
        std::ostringstream s;
        s << sp.train.size() << "/" << sp.val.size() << "/" << sp.test.size() << ", " << shared
          << " traces shared across parts (need 640/160/200, 0)";
        return Outcome{sp.train.size() == 640 && sp.val.size() == 160 && sp.test.size() == 200 && shared == 0,
                       s.str()};
    });

    report(12, "byte-identical reruns", [&] {
        auto c = desk;
        c.sim.classes = 4;
        c.sim.traces_per_class = 6;
        c.model.n_classes = 4;
        c.train.max_epochs = 3;
        const auto a = out / "rerun_a", b = out / "rerun_b";
        run_experiment(c, a);
        run_experiment(c, b);
        std::size_t files = 0, differ = 0;
        bool traces = false, checkpoint = false, reportfile = false;
        for (const auto& e : fs::recursive_directory_iterator(a)) {
            if (!e.is_regular_file()) continue;
            const auto rel = fs::relative(e.path(), a);
            ++files;
            if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) ++differ;
            const auto name = rel.filename().string();
            traces = traces || name.rfind("trace_", 0) == 0;
            checkpoint = checkpoint || name == "model.ckpt";
            reportfile = reportfile || name == "report.csv";
        }
        std::ostringstream s;
        s << files << " files compared, " << differ << " differ (need 0; traces, checkpoint and report present)";
        return Outcome{differ == 0 && traces && checkpoint && reportfile, s.str()};
    });

    std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}

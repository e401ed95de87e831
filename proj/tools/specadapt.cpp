// specadapt: spectral adaptation toolkit for pretrained weight matrices.
//
// Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
// failure. Every run writes a manifest JSON with the fully resolved
// configuration; `replay` re-executes a manifest bit-identically.

#include "specadapt/adapters.hpp"
#include "specadapt/container_io.hpp"
#include "specadapt/errors.hpp"
#include "specadapt/fusion.hpp"
#include "specadapt/rank_analysis.hpp"
#include "specadapt/rng.hpp"
#include "specadapt/svd.hpp"
#include "specadapt/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace specadapt;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct GlobalOptions {
    std::uint64_t seed = 0;
    fs::path out_dir = ".";
    double tol = 1e-9;
};

double now_ms() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

json manifest_skeleton(const std::string& command, const std::vector<std::string>& argv, const GlobalOptions& g) {
    json m;
    m["schema_version"] = kSchemaVersion;
    m["tool"] = "specadapt";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["argv"] = argv;
    m["seed"] = g.seed;
    m["tol"] = g.tol;
    m["out_dir"] = g.out_dir.string();
    m["outputs"] = json::array();
    return m;
}

void write_manifest(json manifest, const fs::path& path) {
    write_text_file(path, manifest.dump(2) + "\n");
}

// exhaustive config validation: every violation is reported at once
class ConfigReader {
public:
    ConfigReader(json cfg, std::string name) : cfg_(std::move(cfg)), name_(std::move(name)) {
        if (!cfg_.is_object()) {
            violations_.push_back("config root must be a JSON object");
        }
    }

    template <typename T>
    T get(const std::string& key, T fallback) {
        known_.push_back(key);
        if (!cfg_.contains(key)) {
            return fallback;
        }
        try {
            return cfg_[key].get<T>();
        } catch (const json::exception&) {
            violations_.push_back("field '" + key + "' has the wrong type");
            return fallback;
        }
    }

    template <typename T>
    std::optional<T> get_optional(const std::string& key) {
        known_.push_back(key);
        if (!cfg_.contains(key)) {
            return std::nullopt;
        }
        try {
            return cfg_[key].get<T>();
        } catch (const json::exception&) {
            violations_.push_back("field '" + key + "' has the wrong type");
            return std::nullopt;
        }
    }

    json get_object(const std::string& key) {
        known_.push_back(key);
        if (!cfg_.contains(key)) {
            return json::object();
        }
        if (!cfg_[key].is_object()) {
            violations_.push_back("field '" + key + "' must be an object");
            return json::object();
        }
        return cfg_[key];
    }

    void require(const std::string& key) {
        if (!cfg_.contains(key)) {
            violations_.push_back("missing required field '" + key + "'");
        }
    }

    void finish() {
        if (cfg_.is_object()) {
            for (const auto& [key, value] : cfg_.items()) {
                (void)value;
                if (std::find(known_.begin(), known_.end(), key) == known_.end()) {
                    violations_.push_back("unknown field '" + key + "'");
                }
            }
        }
        if (!violations_.empty()) {
            std::string all = name_ + ": config schema violations:";
            for (const std::string& v : violations_) {
                all += "\n  - " + v;
            }
            throw FormatError(all);
        }
    }

private:
    json cfg_;
    std::string name_;
    std::vector<std::string> known_;
    std::vector<std::string> violations_;
};

AdapterOptions extras_from_json(const json& extras) {
    AdapterOptions options;
    if (extras.contains("lidb_a")) {
        options.lidb_a = extras["lidb_a"].get<std::size_t>();
    }
    if (extras.contains("lidb_b")) {
        options.lidb_b = extras["lidb_b"].get<std::size_t>();
    }
    if (extras.contains("oft_shared")) {
        options.oft_shared = extras["oft_shared"].get<bool>();
    }
    if (extras.contains("lora_alpha")) {
        options.lora_alpha = extras["lora_alpha"].get<double>();
    }
    return options;
}

bool kind_needs_decomposition(AdapterKind kind) {
    return kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR || kind == AdapterKind::SVDiff;
}

int run_cli(const std::vector<std::string>& args); // forward, used by replay

// ---- decompose -------------------------------------------------------------

int cmd_decompose(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& input,
                  const std::string& out, bool randomized, std::size_t rank) {
    const Matrix w = read_matrix(input);
    json manifest = manifest_skeleton("decompose", argv, g);
    manifest["input"] = input;
    manifest["input_fingerprint"] = fingerprint(w);
    manifest["randomized"] = randomized;

    Stopwatch watch;
    SvdStats stats;
    const SpectralDecomposition d = randomized ? svd_randomized(w, rank, g.seed, 8, &stats) : svd_thin(w, &stats);
    const double elapsed = watch.elapsed_ms();

    const fs::path stem = g.out_dir / out;
    write_decomposition(stem, d);

    const double err = frobenius_norm(reconstruct(d) - w);
    const double limit = g.tol * (1.0 + frobenius_norm(w));
    manifest["reconstruction_error"] = err;
    manifest["reconstruction_limit"] = limit;
    manifest["decompose_ms"] = elapsed;
    manifest["workspace_bytes"] = stats.workspace_bytes;
    manifest["outputs"] = {stem.string() + "_u", stem.string() + "_s", stem.string() + "_v"};
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));

    std::cout << "decomposed " << w.rows() << "x" << w.cols() << " in " << format_double(elapsed)
              << " ms, reconstruction error " << format_double(err) << "\n";
    if (!randomized && err > limit) {
        throw NumericalError("decompose: reconstruction error " + format_double(err) + " exceeds tolerance " +
                             format_double(limit));
    }
    return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& config_path) {
    ConfigReader cfg(json::parse(read_text_file(config_path)), "train");
    (void)cfg.get<int>("schema_version", kSchemaVersion);
    cfg.require("base");
    cfg.require("adapter");
    const std::string base_path = cfg.get<std::string>("base", "");
    const json adapter_cfg = cfg.get_object("adapter");
    TrainConfig tc;
    tc.optimizer = optimizer_from_name(cfg.get<std::string>("optimizer", "adamw"));
    tc.learning_rate = cfg.get<double>("learning_rate", 1e-2);
    tc.steps = cfg.get<std::size_t>("steps", 1000);
    tc.batch_size = cfg.get<std::size_t>("batch_size", 0);
    tc.seed = cfg.get<std::uint64_t>("seed", g.seed);
    tc.weight_decay = cfg.get<double>("weight_decay", 0.01);
    const json data_cfg = cfg.get_object("data");
    const std::string out_prefix = cfg.get<std::string>("out_prefix", "train");
    cfg.finish();

    if (!adapter_cfg.contains("kind")) {
        throw FormatError("train: adapter.kind is required");
    }
    const AdapterKind kind = kind_from_name(adapter_cfg["kind"].get<std::string>());
    const std::size_t rank = adapter_cfg.value("rank", std::size_t{1});
    ColumnSelect columns{0, rank};
    if (adapter_cfg.contains("columns")) {
        columns.start = adapter_cfg["columns"].value("start", std::size_t{0});
        columns.count = adapter_cfg["columns"].value("count", rank);
    }
    if (!(kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR)) {
        columns = {};
    }
    const AdapterOptions options =
        adapter_cfg.contains("extras") ? extras_from_json(adapter_cfg["extras"]) : AdapterOptions{};

    const Matrix w = read_matrix(base_path);
    const BaseWeight base = kind_needs_decomposition(kind) ? BaseWeight::spectral(w) : BaseWeight::dense(w);

    // data: explicit containers, or seeded synthetic regression
    Matrix inputs;
    Matrix targets;
    std::optional<Matrix> target_weight;
    if (data_cfg.contains("target_weight")) {
        target_weight = read_matrix(data_cfg["target_weight"].get<std::string>());
    }
    if (data_cfg.contains("inputs")) {
        inputs = read_matrix(data_cfg["inputs"].get<std::string>());
    } else {
        const std::size_t num = data_cfg.value("num_samples", std::max<std::size_t>(w.cols() * 2, 8));
        Rng rng(Rng::derive(tc.seed, 0xdada));
        inputs = Matrix::random_gaussian(w.cols(), num, rng);
    }
    if (data_cfg.contains("targets")) {
        targets = read_matrix(data_cfg["targets"].get<std::string>());
    } else if (target_weight.has_value()) {
        targets = *target_weight * inputs;
    } else {
        Rng rng(Rng::derive(tc.seed, 0xdadb));
        targets = Matrix::random_gaussian(w.rows(), inputs.cols(), rng);
    }

    AdapterRegressionProblem problem(base, init_adapter(kind, base, rank, columns, tc.seed, options), inputs,
                                     targets);
    if (target_weight.has_value()) {
        problem.set_metric_target(*target_weight);
    }

    Stopwatch watch;
    const TrainTrace trace = train(problem, tc);
    const double elapsed = watch.elapsed_ms();

    // trace CSV: step, loss, metric, param_norm
    std::vector<std::vector<double>> rows;
    rows.reserve(trace.rows.size());
    for (const TraceRow& r : trace.rows) {
        rows.push_back({static_cast<double>(r.step), r.loss, r.metric.value_or(0.0), r.param_norm});
    }
    const fs::path trace_path = g.out_dir / (out_prefix + "_trace.csv");
    write_csv(trace_path, {"step", "loss", "metric", "param_norm"}, rows);
    const fs::path adapter_path = g.out_dir / (out_prefix + "_adapter");
    write_adapter(adapter_path, problem.state());

    json manifest = manifest_skeleton("train", argv, g);
    manifest["config"] = config_path;
    manifest["kind"] = std::string(kind_name(kind));
    manifest["rank"] = rank;
    manifest["steps"] = tc.steps;
    manifest["optimizer"] = std::string(optimizer_name(tc.optimizer));
    manifest["diverged"] = trace.diverged;
    manifest["final_loss"] = trace.rows.back().loss;
    manifest["trainable_params"] = problem.num_params();
    manifest["train_ms"] = elapsed;
    manifest["outputs"] = {trace_path.string(), adapter_path.string()};
    write_manifest(manifest, g.out_dir / (out_prefix + "_manifest.json"));

    std::cout << "trained " << kind_name(kind) << " for " << trace.rows.back().step << " steps, final loss "
              << format_double(trace.rows.back().loss) << (trace.diverged ? " (diverged)" : "") << "\n";
    return 0;
}

// ---- merge -----------------------------------------------------------------

int cmd_merge(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& base_path,
              const std::string& adapter_path, const std::string& out) {
    const Matrix w = read_matrix(base_path);
    const AdapterState state = read_adapter(adapter_path);
    const BaseWeight base = kind_needs_decomposition(state.kind) ? BaseWeight::spectral(w) : BaseWeight::dense(w);
    if (state.base_fingerprint != 0 && state.base_fingerprint != base.fingerprint()) {
        throw FormatError("merge: adapter was tuned on a different base (fingerprint mismatch)");
    }

    const Matrix merged = merge(base, state);
    const fs::path stem = g.out_dir / out;
    write_matrix(stem, merged);

    json manifest = manifest_skeleton("merge", argv, g);
    manifest["base"] = base_path;
    manifest["adapter"] = adapter_path;
    manifest["kind"] = std::string(kind_name(state.kind));
    manifest["delta_norm"] = frobenius_norm(merged - w);
    manifest["outputs"] = {stem.string()};
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));
    std::cout << "merged " << kind_name(state.kind) << " adapter; delta norm "
              << format_double(frobenius_norm(merged - w)) << "\n";
    return 0;
}

// ---- fuse ------------------------------------------------------------------

int cmd_fuse(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& plan_path,
             const std::string& out, bool with_gradient_fusion) {
    const json plan_json = json::parse(read_text_file(plan_path));
    std::vector<std::string> violations;
    for (const char* key : {"base", "entries"}) {
        if (!plan_json.contains(key)) {
            violations.push_back("missing required field '" + std::string(key) + "'");
        }
    }
    for (const auto& [key, value] : plan_json.items()) {
        (void)value;
        if (key != "base" && key != "entries" && key != "policy" && key != "schema_version") {
            violations.push_back("unknown field '" + key + "'");
        }
    }
    if (plan_json.contains("entries") && (!plan_json["entries"].is_array() || plan_json["entries"].empty())) {
        violations.push_back("'entries' must be a non-empty array");
    }
    if (!violations.empty()) {
        std::string all = "fuse plan: schema violations:";
        for (const std::string& v : violations) {
            all += "\n  - " + v;
        }
        throw FormatError(all);
    }
    const std::string base_path = plan_json["base"].get<std::string>();
    const std::string policy_name = plan_json.value("policy", std::string("explicit"));
    const json entries_json = plan_json["entries"];

    const Matrix w = read_matrix(base_path);
    const BaseWeight base = BaseWeight::spectral(w);

    FusionPlan plan;
    plan.base = *base.decomposition;
    plan.policy = schedule_policy_from_name(policy_name);
    std::vector<std::vector<ColumnSelect>> allocations;
    const double default_lambda = 1.0 / static_cast<double>(entries_json.size());
    for (const json& e : entries_json) {
        if (!e.contains("adapter")) {
            throw FormatError("fuse: every entry needs an 'adapter' path");
        }
        FusionEntry entry;
        entry.state = read_adapter(e["adapter"].get<std::string>());
        entry.lambda = e.value("lambda", default_lambda);
        if (entry.state.kind != AdapterKind::SpectralA) {
            throw FormatError("fuse: entry '" + e["adapter"].get<std::string>() +
                              "' is not an additive spectral adapter");
        }
        entry.columns = entry.state.as<SpectralAState>().columns;
        if (e.contains("columns")) {
            const ColumnSelect declared{e["columns"].value("start", std::size_t{0}),
                                        e["columns"].value("count", std::size_t{0})};
            if (!(declared == entry.columns)) {
                throw FormatError("fuse: entry '" + e["adapter"].get<std::string>() +
                                  "' declares columns that disagree with the adapter container");
            }
        }
        allocations.push_back({entry.columns});
        plan.entries.push_back(std::move(entry));
    }

    const Matrix fused = spectral_fuse(plan);
    const fs::path stem = g.out_dir / out;
    write_matrix(stem, fused);

    const OverlapReport overlap = column_overlap(allocations);
    if (overlap.total_overlap > 0) {
        std::cerr << "warning: fused adapters share " << overlap.total_overlap
                  << " column(s); concept collapse becomes more likely\n";
    }

    // functional deviation from each individually merged adapter on seeded
    // concept probes
    std::vector<AdapterState> states;
    std::vector<Matrix> probes;
    for (std::size_t i = 0; i < plan.entries.size(); ++i) {
        states.push_back(plan.entries[i].state);
        Rng rng(Rng::derive(g.seed, 0xbe5 + i));
        probes.push_back(Matrix::random_gaussian(w.cols(), std::max<std::size_t>(8, w.cols()), rng));
    }
    const IdentityPreservationReport identity = identity_preservation_report(base, states, fused, probes);

    json report;
    report["policy"] = policy_name;
    report["lambdas"] = json::array();
    for (const FusionEntry& e : plan.entries) {
        report["lambdas"].push_back(e.lambda);
    }
    report["overlap_pairwise"] = overlap.pairwise;
    report["overlap_total"] = overlap.total_overlap;
    report["identity_deviations"] = identity.deviations;

    if (with_gradient_fusion) {
        std::vector<Matrix> deltas;
        std::vector<Matrix> activations;
        for (std::size_t i = 0; i < plan.entries.size(); ++i) {
            deltas.push_back(merge(base, plan.entries[i].state) - w);
            activations.push_back(probes[i]);
        }
        const GradientFusionResult gf = gradient_fusion(w, deltas, activations);
        report["gradient_fusion_objective"] = gf.objective;
        report["gradient_fusion_residual"] = gf.gradient_residual;
        report["spectral_fusion_objective"] = gradient_fusion_objective(w, deltas, activations, fused);
        const fs::path gf_stem = g.out_dir / (out + "_gradient_fusion");
        write_matrix(gf_stem, gf.merged);
        report["gradient_fusion_output"] = gf_stem.string();
    }

    const fs::path report_path = g.out_dir / (out + "_report.json");
    write_text_file(report_path, report.dump(2) + "\n");

    json manifest = manifest_skeleton("fuse", argv, g);
    manifest["plan"] = plan_path;
    manifest["entries"] = entries_json.size();
    manifest["outputs"] = {stem.string(), report_path.string()};
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));
    std::cout << "fused " << plan.entries.size() << " adapters; total column overlap " << overlap.total_overlap
              << "\n";
    return 0;
}

// ---- budget ----------------------------------------------------------------

int cmd_budget(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& kind_arg,
               std::size_t n, std::size_t m, std::size_t max_rank, const std::string& out) {
    std::vector<AdapterKind> kinds;
    if (kind_arg == "all") {
        kinds.assign(std::begin(kAllKinds), std::end(kAllKinds));
    } else {
        kinds.push_back(kind_from_name(kind_arg));
    }

    std::vector<std::vector<double>> rows;
    std::cout << "kind         rank  params      scaling\n";
    for (AdapterKind kind : kinds) {
        for (std::size_t r = 1; r <= max_rank; ++r) {
            std::size_t count = 0;
            try {
                count = trainable_param_count(kind, n, m, r);
            } catch (const std::invalid_argument&) {
                continue; // unachievable hyperparameter (e.g. OFT block count)
            }
            rows.push_back({static_cast<double>(kind) * 1.0, static_cast<double>(r), static_cast<double>(count)});
            if (r == 1 || kind == AdapterKind::SVDiff || kind == AdapterKind::DoRAVector || r == max_rank ||
                kinds.size() == 1) {
                std::printf("%-13s%-6zu%-12zu%s\n", std::string(kind_name(kind)).c_str(), r, count,
                            budget_scaling(kind).c_str());
            }
            if (kind == AdapterKind::SVDiff || kind == AdapterKind::DoRAVector) {
                break; // single fixed budget
            }
        }
        const std::vector<std::size_t> budgets = available_budgets(kind, n, m, max_rank);
        std::cout << "  " << kind_name(kind) << " budgets:";
        for (std::size_t b : budgets) {
            std::cout << ' ' << b;
        }
        std::cout << "\n";
    }

    std::vector<std::vector<double>> csv_rows;
    json kinds_json = json::array();
    for (AdapterKind kind : kinds) {
        kinds_json.push_back(std::string(kind_name(kind)));
        for (std::size_t r = 1; r <= max_rank; ++r) {
            try {
                csv_rows.push_back({static_cast<double>(r),
                                    static_cast<double>(trainable_param_count(kind, n, m, r)),
                                    static_cast<double>(static_cast<int>(kind))});
            } catch (const std::invalid_argument&) {
            }
        }
    }
    const fs::path csv_path = g.out_dir / (out + ".csv");
    write_csv(csv_path, {"rank", "params", "kind_index"}, csv_rows);

    json manifest = manifest_skeleton("budget", argv, g);
    manifest["kinds"] = kinds_json;
    manifest["n"] = n;
    manifest["m"] = m;
    manifest["max_rank"] = max_rank;
    manifest["outputs"] = {csv_path.string()};
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));
    return 0;
}

// ---- rankcap ---------------------------------------------------------------

int cmd_rankcap(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& kind_arg,
                const std::string& base_path, std::size_t n, std::size_t m, std::size_t rank, std::size_t trials,
                const std::string& out) {
    const AdapterKind kind = kind_from_name(kind_arg);
    Matrix w;
    if (!base_path.empty()) {
        w = read_matrix(base_path);
    } else {
        Rng rng(Rng::derive(g.seed, 0xca9));
        w = Matrix::random_gaussian(n, m, rng);
    }
    const BaseWeight base = BaseWeight::spectral(w);
    const RankCapacityReport report = rank_capacity_empirical(kind, base, rank, trials, g.seed);

    json out_json;
    out_json["kind"] = std::string(kind_name(kind));
    out_json["rank"] = report.rank;
    out_json["base_rank"] = report.base_rank;
    out_json["min_rank_achieved"] = report.min_rank_achieved;
    out_json["max_rank_achieved"] = report.max_rank_achieved;
    out_json["capacity"] = report.capacity;
    out_json["trials"] = report.trials;
    out_json["has_certificate"] = report.certificate.has_value();
    const fs::path report_path = g.out_dir / (out + ".json");
    json manifest = manifest_skeleton("rankcap", argv, g);
    manifest["outputs"] = {report_path.string()};
    if (report.certificate.has_value()) {
        const fs::path cert_path = g.out_dir / (out + "_certificate");
        write_adapter(cert_path, *report.certificate);
        out_json["certificate"] = cert_path.string();
        manifest["outputs"].push_back(cert_path.string());
    }
    write_text_file(report_path, out_json.dump(2) + "\n");
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));

    std::cout << kind_name(kind) << " rank capacity: " << report.capacity << " (min " << report.min_rank_achieved
              << ", max " << report.max_rank_achieved << ", base " << report.base_rank << ")\n";
    return 0;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& kind_arg,
                  std::size_t n, std::size_t m, std::size_t rank, double limit) {
    const AdapterKind kind = kind_from_name(kind_arg);
    Rng rng(Rng::derive(g.seed, 0x9c));
    const Matrix base = kind == AdapterKind::DoRAVector ? Matrix::random_gaussian(n, 1, rng)
                                                        : Matrix::random_gaussian(n, m, rng);
    const double err = grad_check(kind, base, rank, g.seed);
    std::cout << "gradcheck " << kind_name(kind) << ": max relative error " << format_double(err) << "\n";

    json manifest = manifest_skeleton("gradcheck", argv, g);
    manifest["kind"] = std::string(kind_name(kind));
    manifest["rank"] = rank;
    manifest["max_rel_error"] = err;
    manifest["limit"] = limit;
    write_manifest(manifest, g.out_dir / ("gradcheck_" + std::string(kind_name(kind)) + "_manifest.json"));
    if (err > limit) {
        throw NumericalError("gradcheck: max relative error " + format_double(err) + " exceeds " +
                             format_double(limit));
    }
    return 0;
}

// ---- experiment ------------------------------------------------------------

int cmd_experiment(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& name,
                   const std::string& config_path) {
    const json cfg_json = config_path.empty() ? json::object() : json::parse(read_text_file(config_path));
    json manifest = manifest_skeleton("experiment", argv, g);
    manifest["experiment"] = name;
    manifest["config"] = config_path;

    if (name == "subspace") {
        ConfigReader cfg(cfg_json, "experiment subspace");
        (void)cfg.get<int>("schema_version", kSchemaVersion);
        SubspaceAlignmentConfig sc;
        sc.hidden = cfg.get<std::size_t>("hidden", sc.hidden);
        sc.samples = cfg.get<std::size_t>("samples", sc.samples);
        sc.beta = cfg.get<double>("beta", sc.beta);
        sc.steps = cfg.get<std::size_t>("steps", sc.steps);
        sc.learning_rate = cfg.get<double>("learning_rate", sc.learning_rate);
        sc.seed = cfg.get<std::uint64_t>("seed", g.seed);
        sc.noise_probe = cfg.get<double>("noise_probe", sc.noise_probe);
        cfg.finish();

        const SubspaceAlignmentReport report = experiment_subspace_alignment(sc);
        json out;
        out["beta"] = report.beta;
        out["steps"] = report.steps;
        out["initial_out_of_plane_ratio"] = report.initial_out_of_plane_ratio;
        out["out_of_plane_max"] = report.out_of_plane_max_ratio;
        out["plane_angle"] = report.plane_angle_rad;
        out["objective"] = report.objective;
        out["objective_projected"] = report.objective_projected;
        out["noisy_neuron_angle"] = report.noisy_neuron_angle_rad;
        out["final_loss"] = report.final_loss;
        out["final_grad_norm"] = report.final_grad_norm;
        out["converged"] = report.converged;
        const fs::path path = g.out_dir / "subspace_report.json";
        write_text_file(path, out.dump(2) + "\n");
        manifest["outputs"] = {path.string()};
        write_manifest(manifest, g.out_dir / "subspace_manifest.json");
        std::cout << "subspace: out-of-plane " << format_double(report.out_of_plane_max_ratio) << ", plane angle "
                  << format_double(report.plane_angle_rad) << " rad\n";
        return 0;
    }

    ConfigReader cfg(cfg_json, "experiment " + name);
    (void)cfg.get<int>("schema_version", kSchemaVersion);
    RankRecoveryConfig rc;
    rc.n = cfg.get<std::size_t>("n", rc.n);
    rc.m = cfg.get<std::size_t>("m", rc.m);
    rc.r = cfg.get<std::size_t>("r", rc.r);
    rc.seed = cfg.get<std::uint64_t>("seed", g.seed);
    rc.steps = cfg.get<std::size_t>("steps", rc.steps);
    rc.learning_rate = cfg.get<double>("learning_rate", rc.learning_rate);
    rc.num_inputs = cfg.get<std::size_t>("num_inputs", rc.num_inputs);
    rc.base_singular_values = cfg.get<std::vector<double>>("base_singular_values", {});
    cfg.finish();

    if (name == "rank-recovery") {
        const RankRecoveryReport report = experiment_rank_recovery(rc);
        json out;
        out["n"] = report.n;
        out["m"] = report.m;
        out["r"] = report.r;
        out["target_norm"] = report.target_norm;
        out["delta_rank"] = report.delta_rank;
        out["base_distance"] = report.base_distance;
        out["lora_terminal_distance"] = report.lora_terminal_distance;
        out["lora_floor"] = report.lora_floor;
        out["spectral_terminal_distance"] = report.spectral_terminal_distance;
        out["spectral_zero_init_distance"] = report.spectral_zero_init_distance;
        const fs::path path = g.out_dir / "rank_recovery_report.json";
        write_text_file(path, out.dump(2) + "\n");

        std::vector<std::vector<double>> rows;
        const std::size_t len = std::max(report.lora_trace.rows.size(), report.spectral_trace.rows.size());
        for (std::size_t i = 0; i < len; ++i) {
            const auto pick = [&](const TrainTrace& t) {
                return i < t.rows.size() ? t.rows[i] : t.rows.back();
            };
            rows.push_back({static_cast<double>(i), pick(report.lora_trace).loss,
                            pick(report.lora_trace).metric.value_or(0.0), pick(report.spectral_trace).loss,
                            pick(report.spectral_trace).metric.value_or(0.0)});
        }
        const fs::path csv_path = g.out_dir / "rank_recovery_curves.csv";
        write_csv(csv_path, {"step", "lora_loss", "lora_distance", "spectral_a_loss", "spectral_a_distance"}, rows);

        manifest["outputs"] = {path.string(), csv_path.string()};
        write_manifest(manifest, g.out_dir / "rank_recovery_manifest.json");
        std::cout << "rank-recovery: lora " << format_double(report.lora_terminal_distance) << " (floor "
                  << format_double(report.lora_floor) << "), spectral " << format_double(report.spectral_terminal_distance)
                  << "\n";
        return 0;
    }

    if (name == "loss-compare") {
        const LossCompareReport report = experiment_loss_compare(rc);
        std::vector<std::string> header = {"step"};
        for (const std::string& method : report.methods) {
            header.push_back(method + "_loss");
            header.push_back(method + "_distance");
        }
        std::size_t len = 0;
        for (const TrainTrace& t : report.traces) {
            len = std::max(len, t.rows.size());
        }
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < len; ++i) {
            std::vector<double> row = {static_cast<double>(i)};
            for (const TrainTrace& t : report.traces) {
                const TraceRow& r = i < t.rows.size() ? t.rows[i] : t.rows.back();
                row.push_back(r.loss);
                row.push_back(r.metric.value_or(0.0));
            }
            rows.push_back(std::move(row));
        }
        const fs::path csv_path = g.out_dir / "loss_compare.csv";
        write_csv(csv_path, header, rows);

        json out;
        out["methods"] = report.methods;
        out["budgets"] = report.budgets;
        out["terminal_distance"] = report.terminal_distance;
        out["lora_floor"] = report.lora_floor;
        out["target_norm"] = report.target_norm;
        const fs::path path = g.out_dir / "loss_compare_report.json";
        write_text_file(path, out.dump(2) + "\n");

        manifest["outputs"] = {csv_path.string(), path.string()};
        write_manifest(manifest, g.out_dir / "loss_compare_manifest.json");
        std::cout << "loss-compare: wrote " << csv_path.string() << "\n";
        return 0;
    }

    throw FormatError("experiment: unknown name '" + name + "' (subspace, rank-recovery, loss-compare)");
}

// ---- bench-svd -------------------------------------------------------------

int cmd_bench_svd(const GlobalOptions& g, const std::vector<std::string>& argv, const std::string& sizes_arg,
                  std::size_t repeats, bool randomized, std::size_t rank, const std::string& out) {
    std::vector<std::size_t> sizes;
    {
        std::string token;
        for (char c : sizes_arg + ",") {
            if (c == ',') {
                if (!token.empty()) {
                    const long parsed = std::stol(token);
                    if (parsed < 1 || parsed > 4096) {
                        throw FormatError("bench-svd: sizes must be within [1, 4096]");
                    }
                    sizes.push_back(static_cast<std::size_t>(parsed));
                    token.clear();
                }
            } else {
                token += c;
            }
        }
    }
    if (sizes.empty() || repeats == 0) {
        throw FormatError("bench-svd: need at least one size and one repeat");
    }

    auto median_of = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    auto p90_of = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t idx = (v.size() * 9 + 9) / 10 - 1; // nearest-rank
        return v[std::min(idx, v.size() - 1)];
    };

    std::vector<std::vector<double>> rows;
    json timing = json::array();
    for (std::size_t size : sizes) {
        Rng rng(Rng::derive(g.seed, size));
        const Matrix w = Matrix::random_gaussian(size, size, rng);
        std::vector<double> times;
        std::uint64_t mem = 0;
        for (std::size_t rep = 0; rep < repeats; ++rep) {
            SvdStats stats;
            Stopwatch watch;
            if (randomized) {
                (void)svd_randomized(w, std::min(rank, size), g.seed, 8, &stats);
            } else {
                (void)svd_thin(w, &stats);
            }
            times.push_back(watch.elapsed_ms());
            mem = stats.workspace_bytes;
        }
        const double median = median_of(times);
        const double p90 = p90_of(times);
        rows.push_back({static_cast<double>(size), median, p90, static_cast<double>(mem)});
        timing.push_back({{"size", size}, {"t_median_ms", median}, {"t_p90_ms", p90}, {"mem_bytes", mem}});
        std::cout << "size " << size << ": median " << format_double(median) << " ms, p90 " << format_double(p90)
                  << " ms, workspace " << mem << " bytes\n";
    }

    const fs::path csv_path = g.out_dir / (out + ".csv");
    write_csv(csv_path, {"size", "t_median_ms", "t_p90_ms", "mem_bytes"}, rows);

    json manifest = manifest_skeleton("bench-svd", argv, g);
    manifest["sizes"] = sizes;
    manifest["repeats"] = repeats;
    manifest["randomized"] = randomized;
    manifest["rank"] = rank;
    manifest["timings"] = timing;
    manifest["outputs"] = {csv_path.string()};
    write_manifest(manifest, g.out_dir / (out + "_manifest.json"));
    return 0;
}

// ---- replay ----------------------------------------------------------------

int cmd_replay(const std::string& manifest_path, const std::string& out_dir_override) {
    const json manifest = json::parse(read_text_file(manifest_path));
    if (!manifest.contains("argv")) {
        throw FormatError("replay: manifest has no argv record");
    }
    std::vector<std::string> args = manifest["argv"].get<std::vector<std::string>>();
    if (!out_dir_override.empty()) {
        bool replaced = false;
        for (std::size_t i = 0; i + 1 < args.size(); ++i) {
            if (args[i] == "--out-dir") {
                args[i + 1] = out_dir_override;
                replaced = true;
            }
        }
        if (!replaced) {
            args.push_back("--out-dir");
            args.push_back(out_dir_override);
        }
    }
    return run_cli(args);
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"spectral adaptation toolkit for pretrained weight matrices"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    GlobalOptions g;
    app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
    app.add_option("--tol", g.tol, "numerical tolerance for checks")->capture_default_str();

    // decompose
    auto* decompose = app.add_subcommand("decompose", "thin SVD of a matrix container");
    std::string dec_input, dec_out = "base";
    bool dec_randomized = false;
    std::size_t dec_rank = 32;
    decompose->add_option("--input", dec_input, "input matrix container stem")->required();
    decompose->add_option("--out", dec_out, "output stem")->capture_default_str();
    decompose->add_flag("--randomized", dec_randomized, "use the randomized truncated path");
    decompose->add_option("--rank", dec_rank, "target rank for the randomized path")->capture_default_str();

    // train
    auto* train_cmd = app.add_subcommand("train", "train an adapter from a config JSON");
    std::string train_config;
    train_cmd->add_option("--config", train_config, "train config JSON")->required();

    // merge
    auto* merge_cmd = app.add_subcommand("merge", "merge an adapter into its base weight");
    std::string merge_base, merge_adapter, merge_out = "merged";
    merge_cmd->add_option("--base", merge_base, "base matrix container stem")->required();
    merge_cmd->add_option("--adapter", merge_adapter, "adapter container stem")->required();
    merge_cmd->add_option("--out", merge_out, "output stem")->capture_default_str();

    // fuse
    auto* fuse_cmd = app.add_subcommand("fuse", "fuse spectral adapters per a plan JSON");
    std::string fuse_plan, fuse_out = "fused";
    bool fuse_gradient = false;
    fuse_cmd->add_option("--plan", fuse_plan, "fusion plan JSON")->required();
    fuse_cmd->add_option("--out", fuse_out, "output stem")->capture_default_str();
    fuse_cmd->add_flag("--gradient-fusion", fuse_gradient, "also solve the closed-form gradient fusion");

    // budget
    auto* budget_cmd = app.add_subcommand("budget", "trainable-parameter budgets per kind");
    std::string budget_kind = "all", budget_out = "budget";
    std::size_t budget_n = 1024, budget_m = 1024, budget_max_rank = 32;
    budget_cmd->add_option("--kind", budget_kind, "adapter kind or 'all'")->capture_default_str();
    budget_cmd->add_option("--n", budget_n, "weight rows")->capture_default_str();
    budget_cmd->add_option("--m", budget_m, "weight cols")->capture_default_str();
    budget_cmd->add_option("--max-rank", budget_max_rank, "largest hyperparameter to enumerate")
        ->capture_default_str();
    budget_cmd->add_option("--out", budget_out, "output stem")->capture_default_str();

    // rankcap
    auto* rankcap_cmd = app.add_subcommand("rankcap", "empirical rank capacity with certificate");
    std::string rankcap_kind = "lora", rankcap_base, rankcap_out = "rankcap";
    std::size_t rankcap_n = 8, rankcap_m = 12, rankcap_rank = 2, rankcap_trials = 50;
    rankcap_cmd->add_option("--kind", rankcap_kind, "adapter kind")->capture_default_str();
    rankcap_cmd->add_option("--base", rankcap_base, "base matrix container stem (random when omitted)");
    rankcap_cmd->add_option("--n", rankcap_n, "rows of the random base")->capture_default_str();
    rankcap_cmd->add_option("--m", rankcap_m, "cols of the random base")->capture_default_str();
    rankcap_cmd->add_option("--rank", rankcap_rank, "adapter rank")->capture_default_str();
    rankcap_cmd->add_option("--trials", rankcap_trials, "random parameter trials")->capture_default_str();
    rankcap_cmd->add_option("--out", rankcap_out, "output stem")->capture_default_str();

    // gradcheck
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gradcheck_kind = "lora";
    std::size_t gradcheck_n = 6, gradcheck_m = 9, gradcheck_rank = 2;
    double gradcheck_limit = 1e-5;
    gradcheck_cmd->add_option("--kind", gradcheck_kind, "adapter kind")->capture_default_str();
    gradcheck_cmd->add_option("--n", gradcheck_n, "base rows")->capture_default_str();
    gradcheck_cmd->add_option("--m", gradcheck_m, "base cols")->capture_default_str();
    gradcheck_cmd->add_option("--rank", gradcheck_rank, "adapter rank")->capture_default_str();
    gradcheck_cmd->add_option("--limit", gradcheck_limit, "failure threshold")->capture_default_str();

    // experiment
    auto* experiment_cmd = app.add_subcommand("experiment", "run a named experiment");
    std::string experiment_name, experiment_config;
    experiment_cmd->add_option("name", experiment_name, "subspace | rank-recovery | loss-compare")->required();
    experiment_cmd->add_option("--config", experiment_config, "experiment config JSON");

    // bench-svd
    auto* bench_cmd = app.add_subcommand("bench-svd", "SVD runtime and workspace benchmark");
    std::string bench_sizes = "64,128,256", bench_out = "bench_svd";
    std::size_t bench_repeats = 5, bench_rank = 32;
    bool bench_randomized = false;
    bench_cmd->add_option("--sizes", bench_sizes, "comma-separated square sizes")->capture_default_str();
    bench_cmd->add_option("--repeats", bench_repeats, "repeats per size")->capture_default_str();
    bench_cmd->add_flag("--randomized", bench_randomized, "benchmark the randomized truncated path");
    bench_cmd->add_option("--rank", bench_rank, "rank for the randomized path")->capture_default_str();
    bench_cmd->add_option("--out", bench_out, "output stem")->capture_default_str();

    // replay
    auto* replay_cmd = app.add_subcommand("replay", "re-run a recorded manifest");
    std::string replay_manifest, replay_out_dir;
    replay_cmd->add_option("--manifest", replay_manifest, "manifest JSON path")->required();
    replay_cmd->add_option("--out-dir", replay_out_dir, "redirect outputs");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    std::filesystem::create_directories(g.out_dir);

    if (decompose->parsed()) {
        return cmd_decompose(g, args, dec_input, dec_out, dec_randomized, dec_rank);
    }
    if (train_cmd->parsed()) {
        return cmd_train(g, args, train_config);
    }
    if (merge_cmd->parsed()) {
        return cmd_merge(g, args, merge_base, merge_adapter, merge_out);
    }
    if (fuse_cmd->parsed()) {
        return cmd_fuse(g, args, fuse_plan, fuse_out, fuse_gradient);
    }
    if (budget_cmd->parsed()) {
        return cmd_budget(g, args, budget_kind, budget_n, budget_m, budget_max_rank, budget_out);
    }
    if (rankcap_cmd->parsed()) {
        return cmd_rankcap(g, args, rankcap_kind, rankcap_base, rankcap_n, rankcap_m, rankcap_rank, rankcap_trials,
                           rankcap_out);
    }
    if (gradcheck_cmd->parsed()) {
        return cmd_gradcheck(g, args, gradcheck_kind, gradcheck_n, gradcheck_m, gradcheck_rank, gradcheck_limit);
    }
    if (experiment_cmd->parsed()) {
        return cmd_experiment(g, args, experiment_name, experiment_config);
    }
    if (bench_cmd->parsed()) {
        return cmd_bench_svd(g, args, bench_sizes, bench_repeats, bench_randomized, bench_rank, bench_out);
    }
    if (replay_cmd->parsed()) {
        return cmd_replay(replay_manifest, replay_out_dir);
    }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run_cli(args);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            std::cout << e.what() << "\n";
            return 0; // --help
        }
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}

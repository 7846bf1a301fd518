#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rbsde/bsde_solver.hpp"
#include "rbsde/config.hpp"
#include "rbsde/ensemble_io.hpp"
#include "rbsde/forward_sim.hpp"
#include "rbsde/hjb_oracle.hpp"
#include "rbsde/problem.hpp"

namespace rbsde {

inline constexpr int exit_pass = 0;
inline constexpr int exit_invariant_failure = 2;
inline constexpr int exit_config_error = 3;

// Numbers in the report are objects: {value, stderr} for Monte-Carlo
// estimates, {value, error_bound} for deterministic error bounds, and
// {value, tag: "exact"} for quantities without error.
inline json measured(double v, double se) { return {{"value", v}, {"stderr", se}}; }
inline json bounded(double v, double err) { return {{"value", v}, {"error_bound", err}}; }
inline json exact(double v) { return {{"value", v}, {"tag", "exact"}}; }
inline json exact_count(std::uint64_t v) { return {{"value", v}, {"tag", "exact"}}; }

// summary.csv rows: stage, quantity, value, error, kind
class SummaryTable {
public:
    void add(const std::string& stage, const std::string& key, const json& num)
    {
        std::ostringstream os;
        os.precision(17);
        os << stage << ',' << key << ',' << num.at("value").get<double>() << ',';
        if (num.contains("stderr"))
            os << num.at("stderr").get<double>() << ",stderr";
        else if (num.contains("error_bound"))
            os << num.at("error_bound").get<double>() << ",error_bound";
        else
            os << "0,exact";
        rows_.push_back(os.str());
    }
    std::string csv() const
    {
        std::string s = "stage,quantity,value,error,kind\n";
        for (const auto& r : rows_) s += r + '\n';
        return s;
    }

private:
    std::vector<std::string> rows_;
};

struct ExperimentResult {
    int exit_code = exit_pass;
    json report;
    std::string summary_csv;
    std::vector<std::string> files;
};

namespace detail {

struct RunState {
    const ExperimentConfig& cfg;
    std::filesystem::path dir;
    json stages = json::object();
    SummaryTable summary;
    std::vector<std::string> files;
    std::vector<std::string> hard_failures;
    std::shared_ptr<const BSDESolution> solution;
    std::optional<ValueCertificate> cert;
    std::optional<GridValue> grid_value;
    std::optional<double> grid_error;

    void write(const std::string& name, const std::string& content)
    {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw NumericalFailure("cannot write " + (dir / name).string());
        out << content;
        files.push_back(name);
    }

    void number(json& node, const std::string& stage, const std::string& key, json num)
    {
        summary.add(stage, key, num);
        node[key] = std::move(num);
    }

    void verdict(json& node, const std::string& name, bool ok, const std::string& detail = {})
    {
        node["invariants"][name] = {{"pass", ok}, {"hard", true}};
        if (!detail.empty()) node["invariants"][name]["detail"] = detail;
        if (!ok) hard_failures.push_back(name);
    }
};

inline json growth_json(const GrowthConstants& g)
{
    return {{"p", exact(g.p)}, {"c_bar", exact(g.c_bar)}, {"beta_bar", exact(g.beta_bar)},
            {"bdg_constant", exact(g.bdg_constant)}};
}

inline void stage_validate(RunState& rs, json& node)
{
    const auto rep = validate_problem(rs.cfg.problem.spec, ProbeOptions{256, 1.05, rs.cfg.seed});
    node["message"] = rep.message;
    node["generic_growth"] = growth_json(rep.generic_growth);
    node["used_growth"] = growth_json(rep.used_growth);
    rs.number(node, "validate", "empirical_L", exact(rep.empirical_L));
    rs.number(node, "validate", "origin_bound", exact(rep.origin_bound));
    rs.number(node, "validate", "tail_decay_rate", exact(rs.cfg.problem.spec.tail_decay_rate()));
    rs.verdict(node, "assumptions", rep.valid, rep.message);
    node["lipschitz_ok"] = rep.lipschitz_ok;
    node["reward_growth_ok"] = rep.reward_ok;
    node["origin_ok"] = rep.origin_ok;
}

inline void stage_simulate(RunState& rs, json& node)
{
    const auto& c = rs.cfg;
    const ProblemSpec& spec = c.problem.spec;
    const JumpMeasure measure(spec.control_space, c.limit.lambda_total, c.limit.mark_weights);
    const double a0 = c.limit.a0.value_or(spec.control_space.lo());
    const auto grid = TimeGrid::with_max_step(c.simulate.T, c.simulate.dt);
    SimulationOptions so;
    so.threads = c.threads;
    const auto ens = simulate_randomized_pair(spec, measure, a0, grid, c.simulate.n_paths, c.seed, so);
    std::ostringstream csv;
    write_ensemble_csv(ens, csv, c.simulate.csv_paths);
    rs.write("ensemble.csv", csv.str());
    if (c.simulate.binary) {
        std::ostringstream bin(std::ios::binary);
        write_ensemble_binary(ens, bin);
        rs.write("ensemble.bin", bin.str());
    }
    rs.number(node, "simulate", "n_paths", exact_count(ens.n_paths()));
    rs.number(node, "simulate", "n_divergent", exact_count(ens.n_divergent()));
    rs.number(node, "simulate", "dt", exact(grid.dt()));
    const auto reward = estimate_reward(ens, spec, grid.t_end(), c.threads);
    rs.number(node, "simulate", "nominal_reward", measured(reward.value, reward.std_error));
    json moments = json::array();
    bool ok = true;
    for (double p : c.simulate.moment_orders) {
        const auto m = check_moment_bound(ens, p, spec);
        const std::string key = "moment_p" + std::to_string(p).substr(0, 4);
        json e = {{"p", exact(p)},
                  {"sup_moment_at_T", measured(m.empirical.back(), m.std_error.back())},
                  {"bound_at_T", exact(m.bound.back())},
                  {"pass", m.pass}};
        rs.summary.add("simulate", key, e["sup_moment_at_T"]);
        moments.push_back(e);
        ok = ok && m.pass;
    }
    node["moment_checks"] = moments;
    rs.verdict(node, "moment_bound", ok);
}

inline void stage_solve_bsde(RunState& rs, json& node)
{
    const auto& c = rs.cfg;
    auto cert = solve_constrained_limit(c.problem.spec, c.schedule, c.basis, c.target_tol, c.limit);
    rs.write("stages.csv", stage_csv(cert));
    json stages = json::array();
    const StageResult* prev = nullptr;
    for (const auto& s : cert.stages) {
        json e = {{"T", exact(s.T)},
                  {"n", exact(s.n)},
                  {"dt", exact(s.dt)},
                  {"n_paths", exact_count(s.n_paths)},
                  {"Y0", measured(s.y0, s.std_error)},
                  {"t_tail", exact(s.t_tail)},
                  {"constraint_violation", measured(s.constraint_violation, s.constraint_violation_stderr)},
                  {"K_T_mean", measured(s.k_mean, s.k_stderr)},
                  {"noise_floor", exact(s.noise_floor)},
                  {"max_condition", exact(s.max_condition)}};
        // common random numbers make the stderr of the difference smaller than this sum
        if (!std::isnan(s.n_gap) && prev) e["n_gap"] = measured(s.n_gap, std::hypot(s.std_error, prev->std_error));
        stages.push_back(e);
        prev = &s;
    }
    node["stages"] = stages;
    rs.number(node, "solve-bsde", "Y0", bounded(cert.y0, cert.total));
    rs.number(node, "solve-bsde", "mc_error", exact(cert.mc_error));
    rs.number(node, "solve-bsde", "t_tail", exact(cert.t_tail));
    rs.number(node, "solve-bsde", "n_gap", exact(cert.n_gap));
    rs.number(node, "solve-bsde", "certificate_total", exact(cert.total));
    node["converged"] = cert.converged;
    node["diagnostics"] = cert.diagnostics;
    rs.verdict(node, "monotone_in_n", cert.monotone_ok);
    rs.verdict(node, "tail_contraction", cert.tail_ok);
    const auto& sol = *cert.solution;
    rs.number(node, "solve-bsde", "pathwise_mean", measured(sol.pathwise_mean, sol.y0_stderr));
    if (sol.finite && c.problem.spec.markovian() && c.problem.spec.dim_state == 1) {
        std::vector<double> edges;
        const auto box = c.hjb.box.empty() ? std::pair{-6.0, 6.0} : c.hjb.box.front();
        const int cells = 48;
        for (int i = 0; i <= cells; ++i) edges.push_back(box.first + (box.second - box.first) * i / cells);
        rs.write("feedback_table.csv", feedback_table_csv(to_feedback_table(sol, c.checks.epsilon, edges)));
    }
    rs.solution = cert.solution;
    rs.cert = std::move(cert);
}

inline void stage_solve_hjb(RunState& rs, json& node)
{
    const auto& c = rs.cfg;
    const ProblemSpec& spec = c.problem.spec;
    if (!spec.markovian() || spec.dim_state > 2)
        throw InvalidArgument("solve-hjb: the oracle needs a Markovian problem of dimension 1 or 2");
    HJBOptions ho;
    ho.strict_monotone = c.hjb.strict_monotone;
    auto gv = solve_hjb_fd(spec, SpatialGrid::uniform(c.hjb.box, c.hjb.dx), ho);
    const auto coarse = solve_hjb_fd(spec, SpatialGrid::uniform(c.hjb.box, 2.0 * c.hjb.dx), ho);
    const double u = interpolate(gv, spec.x0);
    const double err = std::abs(u - interpolate(coarse, spec.x0)); // first-order scheme: error ~ this difference
    rs.write("hjb_grid.csv", grid_value_csv(gv));
    rs.number(node, "solve-hjb", "u_x0", bounded(u, err));
    rs.number(node, "solve-hjb", "residual_sup", exact(gv.residual_sup));
    rs.number(node, "solve-hjb", "iterations", exact_count(gv.iterations));
    node["monotone_stencil"] = gv.monotone;
    rs.verdict(node, "policy_iteration_converged", gv.converged);
    rs.grid_error = err;
    rs.grid_value = std::move(gv);
}

inline void stage_compare(RunState& rs, json& node)
{
    const auto& c = rs.cfg;
    const auto rep = compare_value(*rs.grid_value, rs.cert->y0, rs.cert->total, c.problem.spec.x0, *rs.grid_error);
    rs.number(node, "compare", "u_x0", bounded(rep.u_x0, *rs.grid_error));
    rs.number(node, "compare", "Y0", bounded(rep.y0, rs.cert->total));
    rs.number(node, "compare", "abs_gap", bounded(rep.abs_gap, rep.tolerance));
    rs.number(node, "compare", "rel_gap", exact(rep.rel_gap));
    node["within_certificate"] = rep.within_certificate;
    rs.verdict(node, "relative_gap", rep.rel_gap <= c.compare_rel_tol,
               "tolerance " + std::to_string(c.compare_rel_tol));
    if (c.problem.known.value) {
        const double v = *c.problem.known.value;
        const double rel = std::abs(rs.cert->y0 - v) / std::max(std::abs(v), 1e-300);
        rs.number(node, "compare", "known_value", exact(v));
        rs.number(node, "compare", "rel_gap_known", exact(rel));
        rs.verdict(node, "known_value_gap", rel <= c.compare_rel_tol);
    }
}

inline void stage_invariants(RunState& rs, json& node)
{
    const auto& c = rs.cfg;
    const BSDESolution& sol = *rs.solution;
    CheckOptions co;
    co.n_paths = c.checks.n_paths;
    co.threads = c.threads;
    co.seed = stream_key(c.seed, 0, StreamTag::probe);
    const auto nus = random_intensities(sol.n_penalty, c.checks.dual_samples, stream_key(c.seed, 1, StreamTag::probe));
    const auto dual = dual_value_check(sol, nus, c.checks.epsilon, co);
    json d = json::array();
    for (const auto& s : dual.samples) d.push_back({{"label", s.label}, {"J", measured(s.value, s.std_error)}});
    node["dual"] = {{"samples", d},
                    {"J_optimal", measured(dual.optimal.value, dual.optimal.std_error)},
                    {"epsilon", exact(dual.epsilon)}};
    rs.summary.add("invariants", "J_optimal", measured(dual.optimal.value, dual.optimal.std_error));
    rs.verdict(node, "dual_lower_bound", dual.lower_ok);
    rs.verdict(node, "dual_epsilon_optimal", dual.upper_ok);

    const auto rule = StoppingRule::exit_box(c.checks.dpp_box, c.checks.dpp_cap_fraction * sol.grid.t_end());
    const auto dpp = dpp_residual(sol, rule, nus, c.checks.epsilon, co);
    json e = json::array();
    for (const auto& s : dpp.samples) e.push_back({{"label", s.label}, {"residual", measured(s.residual, s.std_error)}});
    node["dpp"] = {{"samples", e}};
    if (dpp.optimal) {
        node["dpp"]["optimal_residual"] = measured(dpp.optimal->residual, dpp.optimal->std_error);
        rs.summary.add("invariants", "dpp_optimal_residual", node["dpp"]["optimal_residual"]);
    }
    rs.verdict(node, "dpp_samples", dpp.samples_ok);
    rs.verdict(node, "dpp_optimal", dpp.optimal_ok);
}

inline std::vector<Stage> dependencies(Stage s)
{
    switch (s) {
    case Stage::validate: return {};
    case Stage::simulate:
    case Stage::solve_bsde:
    case Stage::solve_hjb: return {Stage::validate};
    case Stage::compare: return {Stage::validate, Stage::solve_bsde, Stage::solve_hjb};
    case Stage::invariants: return {Stage::validate, Stage::solve_bsde};
    }
    return {};
}

} // namespace detail

// Runs the configured pipeline in order. A failing stage (exception or hard
// invariant) is recorded and every later stage that depends on it is skipped.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg)
{
    detail::RunState rs{cfg, std::filesystem::path(cfg.output_dir)};
    std::filesystem::create_directories(rs.dir);
    std::vector<Stage> failed;
    json order = json::array();
    for (Stage st : cfg.pipeline) {
        const std::string name = to_string(st);
        order.push_back(name);
        json node = json::object();
        bool skip = false;
        for (Stage dep : detail::dependencies(st)) {
            const bool requested = cfg.has(dep);
            const bool dep_failed = std::find(failed.begin(), failed.end(), dep) != failed.end();
            // compare and invariants cannot run without their inputs
            const bool needed = st == Stage::compare || st == Stage::invariants ? dep != Stage::validate : false;
            if (dep_failed || (needed && !requested)) skip = true;
        }
        if (skip) {
            node["status"] = "skipped";
            rs.stages[name] = node;
            failed.push_back(st);
            continue;
        }
        const std::size_t before = rs.hard_failures.size();
        try {
            switch (st) {
            case Stage::validate: detail::stage_validate(rs, node); break;
            case Stage::simulate: detail::stage_simulate(rs, node); break;
            case Stage::solve_bsde: detail::stage_solve_bsde(rs, node); break;
            case Stage::solve_hjb: detail::stage_solve_hjb(rs, node); break;
            case Stage::compare: detail::stage_compare(rs, node); break;
            case Stage::invariants: detail::stage_invariants(rs, node); break;
            }
            node["status"] = rs.hard_failures.size() == before ? "pass" : "fail";
        } catch (const std::exception& e) {
            node["status"] = "error";
            node["error"] = e.what();
            rs.hard_failures.push_back(name + ": " + e.what());
        }
        if (node["status"] != "pass") failed.push_back(st);
        rs.stages[name] = node;
    }

    ExperimentResult res;
    res.exit_code = rs.hard_failures.empty() ? exit_pass : exit_invariant_failure;
    res.report = {{"problem", cfg.problem_name},
                  {"provenance", to_string(cfg.problem.known.provenance)},
                  {"oracle", cfg.problem.known.oracle},
                  {"bsde_stage", cfg.problem.bsde_stage},
                  {"seed", exact_count(cfg.seed)},
                  {"threads", exact_count(cfg.threads)},
                  {"pipeline", order},
                  {"stages", rs.stages},
                  {"hard_failures", rs.hard_failures},
                  {"pass", rs.hard_failures.empty()}};
    if (!cfg.problem.caveat.empty()) res.report["caveat"] = cfg.problem.caveat;
    res.summary_csv = rs.summary.csv();
    rs.write("summary.csv", res.summary_csv);
    rs.write("report.json", res.report.dump(2) + "\n");
    res.files = rs.files;
    return res;
}

} // namespace rbsde

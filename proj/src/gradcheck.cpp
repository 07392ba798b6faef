#include "rsmpod/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "rsmpod/rng.hpp"

namespace rsmpod {

double finite_diff_check(const std::function<Tensor(ParamStore&)>& f, ParamStore& params,
                         double eps, int max_elems_per_param, GradCheckReport* report) {
    params.zero_all_grads();
    Tensor y = f(params);
    if (!std::isfinite(y.item())) throw EvalError("finite_diff_check: f is non-finite");
    y.backward();

    // Snapshot analytic grads before the probing evaluations rebuild graphs.
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [path, t] : params.params()) {
        if (params.is_frozen(path)) continue;
        analytic[path] = t.grad().empty() ? std::vector<double>(t.size(), 0.0) : t.grad();
    }

    auto eval = [&]() {
        double v = f(params).item();
        if (!std::isfinite(v)) throw EvalError("finite_diff_check: f is non-finite");
        return v;
    };

    double worst = 0.0;
    std::string worst_path;
    for (auto& [path, grads] : analytic) {
        auto& vals = params.at(path).mutable_values();
        std::vector<size_t> picks;
        if (max_elems_per_param < 0 || vals.size() <= static_cast<size_t>(max_elems_per_param)) {
            picks.resize(vals.size());
            for (size_t i = 0; i < vals.size(); ++i) picks[i] = i;
        } else {
            Rng rng(mix_seed(0x6fd7a1c3, fnv1a(path)));
            picks = rng.sample_without_replacement(vals.size(),
                                                   static_cast<size_t>(max_elems_per_param));
            std::sort(picks.begin(), picks.end());
        }
        double path_worst = 0.0;
        for (size_t i : picks) {
            double saved = vals[i];
            vals[i] = saved + eps;
            double up = eval();
            vals[i] = saved - eps;
            double dn = eval();
            vals[i] = saved;
            double numeric = (up - dn) / (2.0 * eps);
            double rel = std::fabs(grads[i] - numeric) / std::max(1.0, std::fabs(numeric));
            path_worst = std::max(path_worst, rel);
        }
        if (report)
            report->entries.push_back({path, path_worst, static_cast<int>(picks.size())});
        if (path_worst > worst) {
            worst = path_worst;
            worst_path = path;
        }
    }
    if (report) {
        report->max_rel_err = worst;
        report->worst_path = worst_path;
    }
    return worst;
}

}  // namespace rsmpod

#pragma once
#include <functional>
#include <string>
#include <vector>

#include "rsmpod/param_store.hpp"

namespace rsmpod {

struct GradCheckReport {
    struct Entry {
        std::string path;
        double max_rel_err = 0.0;
        int checked = 0;
    };
    std::vector<Entry> entries;
    double max_rel_err = 0.0;
    std::string worst_path;
};

// Compares the backward pass of the scalar f(params) against central finite
// differences over every unfrozen parameter. rel err per element is
// |analytic - numeric| / max(1, |numeric|). When max_elems_per_param >= 0,
// a deterministic per-path subset of elements is probed.
double finite_diff_check(const std::function<Tensor(ParamStore&)>& f, ParamStore& params,
                         double eps = 1e-3, int max_elems_per_param = -1,
                         GradCheckReport* report = nullptr);

}  // namespace rsmpod

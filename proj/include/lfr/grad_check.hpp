#pragma once

// Central finite-difference checking of tape gradients.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lfr/tensor.hpp"

namespace lfr {

struct GradCheckEntry {
    std::string name;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    int checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool ok(double tol) const { return max_rel_err < tol; }
};

// f builds a fresh scalar graph from the given leaf tensors each call.
// max_probes > 0 limits the checked entries per input (seeded subsample);
// 0 checks every entry.
inline GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                  std::vector<Tensor> inputs, double step = 1e-4,
                                  const std::vector<std::string>& names = {}, int max_probes = 0,
                                  std::uint64_t probe_seed = 7, double denom_floor = 1e-8) {
    if (!(step > 0.0) || step > 1e-2) throw DomainError("grad_check: step must lie in (0, 1e-2]");
    GradCheckReport report;

    Tensor out = f(inputs);
    if (out.numel() != 1) throw DimensionError("grad_check: f must return a scalar");
    if (!std::isfinite(out.item())) throw NumericError("grad_check: f is non-finite at the base point");
    for (auto& t : inputs) t.zero_grad();
    out.backward();

    std::mt19937_64 rng(probe_seed);
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor& t = inputs[k];
        if (!t.requires_grad()) continue;
        GradCheckEntry e;
        e.name = k < names.size() ? names[k] : ("input" + std::to_string(k));
        std::vector<int> idxs(static_cast<size_t>(t.numel()));
        for (int i = 0; i < t.numel(); ++i) idxs[static_cast<size_t>(i)] = i;
        if (max_probes > 0 && t.numel() > max_probes) {
            for (int i = 0; i < max_probes; ++i) {
                const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(idxs.size() - i));
                std::swap(idxs[static_cast<size_t>(i)], idxs[static_cast<size_t>(j)]);
            }
            idxs.resize(static_cast<size_t>(max_probes));
        }
        for (int i : idxs) {
            auto& data = t.mutable_data();
            const double orig = data[static_cast<size_t>(i)];
            data[static_cast<size_t>(i)] = orig + step;
            const double fp = f(inputs).item();
            data[static_cast<size_t>(i)] = orig - step;
            const double fm = f(inputs).item();
            data[static_cast<size_t>(i)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite f while perturbing " + e.name + "[" +
                                   std::to_string(i) + "]");
            const double fd = (fp - fm) / (2.0 * step);
            const double an =
                i < static_cast<int>(t.grad().size()) ? t.grad()[static_cast<size_t>(i)] : 0.0;
            const double abs_err = std::abs(fd - an);
            const double denom = std::max({std::abs(fd), std::abs(an), denom_floor});
            e.max_abs_err = std::max(e.max_abs_err, abs_err);
            e.max_rel_err = std::max(e.max_rel_err, abs_err / denom);
            ++e.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
        report.entries.push_back(std::move(e));
    }
    return report;
}

}  // namespace lfr

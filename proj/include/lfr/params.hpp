#pragma once

// Named parameter registry shared by backbone, adapters, and head.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lfr/tensor.hpp"

namespace lfr {

class ParamRegistry {
public:
    Tensor create(const std::string& name, Shape shape, const std::function<double()>& init) {
        std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : d) x = init();
        Tensor t = Tensor::leaf(std::move(shape), std::move(d), true);
        items_.emplace_back(name, t);
        return t;
    }
    Tensor constant(const std::string& name, Shape shape, double v) {
        Tensor t = Tensor::full(std::move(shape), v, true);
        items_.emplace_back(name, t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw DomainError("parameter not found: " + name);
    }

    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }

    std::int64_t count() const {
        std::int64_t c = 0;
        for (const auto& [n, t] : items_) c += t.numel();
        return c;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Seed-determined gaussian initializer.
class InitRng {
public:
    explicit InitRng(std::uint64_t seed) : rng_(seed) {}
    std::function<double()> normal(double std_dev) {
        return [this, std_dev] { return dist_(rng_) * std_dev; };
    }
    std::function<double()> zeros() {
        return [] { return 0.0; };
    }
    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace lfr

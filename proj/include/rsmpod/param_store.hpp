#pragma once
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rsmpod/tensor.hpp"

namespace rsmpod {

// Named parameter container. Iteration is sorted by path (std::map), so
// gradient merges and serialization are deterministic.
class ParamStore {
public:
    // Registers a parameter; throws on duplicate path.
    Tensor& create(const std::string& path, Tensor t);
    // Returns the existing parameter or creates it via the factory.
    template <class F>
    Tensor& get_or_create(const std::string& path, F&& factory) {
        auto it = params_.find(path);
        if (it != params_.end()) return it->second;
        return create(path, factory());
    }

    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;
    bool contains(const std::string& path) const { return params_.count(path) > 0; }
    size_t count() const { return params_.size(); }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }

    // Freezing: a parameter is frozen when any prefix matches its path.
    // Frozen leaves also drop requires_grad so backward skips their subgraphs.
    void set_frozen_prefixes(std::set<std::string> prefixes);
    const std::set<std::string>& frozen_prefixes() const { return frozen_; }
    bool is_frozen(const std::string& path) const;

    void zero_all_grads();

    // Versioned binary checkpoint: magic "PDPS", version u32, count u32, then
    // per parameter: u32 path length + UTF-8 path, u32 rank, u32 dims,
    // little-endian f64 payload.
    void save(const std::string& file) const;
    // Loads into this store; existing tensors keep identity (values replaced)
    // so optimizer/caller handles stay valid. Unknown paths are created.
    void load(const std::string& file);

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> frozen_;
};

// Fresh tensors with copied values (handles into the source are shared
// nodes, so variants that keep training need this).
ParamStore deep_copy(const ParamStore& ps);

}  // namespace rsmpod

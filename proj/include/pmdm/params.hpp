#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmdm/tensor.hpp"

namespace pmdm {

struct AdamConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

/// First/second moment buffers keyed by parameter name. Auto-created at zero
/// on first use.
struct AdamState {
    struct Moments {
        std::vector<float> m;
        std::vector<float> v;
    };
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
    bool empty() const { return moments.empty() && step == 0; }
};

/// Named, shaped weight tensors for one network plus its optimizer state.
/// Iteration order is name order, so every traversal is deterministic.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::map<std::string, Tensor>& entries() { return entries_; }
    const std::map<std::string, Tensor>& entries() const { return entries_; }

    void zero_grad();
    /// Number of scalar values across trainable entries.
    std::int64_t trainable_count() const;
    bool all_finite() const;

    AdamState adam;

private:
    std::map<std::string, Tensor> entries_;
};

/// One Adam update over every trainable entry with a populated gradient.
/// weight_decay enters as an L2 term added to the gradient.
void adam_step(ParamStore& params, const AdamConfig& cfg);

/// Weight container: magic "PMDM", u32 version, u32 entry count, then per
/// entry u32 name length + UTF-8 name, u32 rank, u32 extents, little-endian
/// float32 payload (row-major). Adam moments ride along as entries named
/// "<param>.adam_m"/"<param>.adam_v" plus a scalar "adam.step".
void save_params(const std::string& path, const ParamStore& params);
ParamStore load_params(const std::string& path);

}  // namespace pmdm

#include "pmdm/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace pmdm {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    auto [it, inserted] = entries_.emplace(name, std::move(t));
    if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) != 0; }

void ParamStore::zero_grad() {
    for (auto& [name, t] : entries_)
        if (t.requires_grad()) t.zero_grad();
}

std::int64_t ParamStore::trainable_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_)
        if (t.requires_grad()) n += t.size();
    return n;
}

bool ParamStore::all_finite() const {
    for (const auto& [name, t] : entries_)
        if (!t.all_finite()) return false;
    return true;
}

void adam_step(ParamStore& params, const AdamConfig& cfg) {
    params.adam.step += 1;
    const double t = static_cast<double>(params.adam.step);
    const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
    const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
    for (auto& [name, p] : params.entries()) {
        if (!p.requires_grad()) continue;
        auto& mom = params.adam.moments[name];
        const std::size_t n = p.values().size();
        if (mom.m.size() != n) mom.m.assign(n, 0.0f);
        if (mom.v.size() != n) mom.v.assign(n, 0.0f);
        float* w = p.data();
        const float* g = p.grad();
        for (std::size_t i = 0; i < n; ++i) {
            const float gi = g[i] + cfg.weight_decay * w[i];
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0f - cfg.beta1) * gi;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0f - cfg.beta2) * gi * gi;
            const float mhat = mom.m[i] / bc1;
            const float vhat = mom.v[i] / bc2;
            w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[4] = {'P', 'M', 'D', 'M'};
constexpr std::uint32_t kVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_u32(std::FILE* f, std::uint32_t v) {
    if (std::fwrite(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("write failed");
}

std::uint32_t read_u32(std::FILE* f) {
    std::uint32_t v;
    if (std::fread(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("unexpected end of weight file");
    return v;
}

void write_entry(std::FILE* f, const std::string& name, const Shape& shape,
                 const std::vector<float>& data) {
    write_u32(f, static_cast<std::uint32_t>(name.size()));
    if (!name.empty() && std::fwrite(name.data(), 1, name.size(), f) != name.size())
        throw std::runtime_error("write failed");
    write_u32(f, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) write_u32(f, static_cast<std::uint32_t>(d));
    if (!data.empty() && std::fwrite(data.data(), sizeof(float), data.size(), f) != data.size())
        throw std::runtime_error("write failed");
}

}  // namespace

void save_params(const std::string& path, const ParamStore& params) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    if (std::fwrite(kMagic, 1, 4, f.get()) != 4) throw std::runtime_error("write failed");
    write_u32(f.get(), kVersion);
    std::uint32_t count = static_cast<std::uint32_t>(params.entries().size());
    bool has_adam = !params.adam.empty();
    if (has_adam) {
        count += static_cast<std::uint32_t>(2 * params.adam.moments.size()) + 1;
    }
    write_u32(f.get(), count);
    for (const auto& [name, t] : params.entries())
        write_entry(f.get(), name, t.shape(), t.values());
    if (has_adam) {
        for (const auto& [name, mom] : params.adam.moments) {
            const Shape& shape = params.at(name).shape();
            write_entry(f.get(), name + ".adam_m", shape, mom.m);
            write_entry(f.get(), name + ".adam_v", shape, mom.v);
        }
        write_entry(f.get(), "adam.step", {1}, {static_cast<float>(params.adam.step)});
    }
    if (std::fflush(f.get()) != 0) throw std::runtime_error("flush failed for " + path);
}

ParamStore load_params(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error(path + " is not a weight file (bad magic)");
    const std::uint32_t version = read_u32(f.get());
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported weight format version " + std::to_string(version));
    const std::uint32_t count = read_u32(f.get());
    ParamStore store;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint32_t name_len = read_u32(f.get());
        std::string name(name_len, '\0');
        if (name_len && std::fread(name.data(), 1, name_len, f.get()) != name_len)
            throw std::runtime_error("unexpected end of weight file");
        const std::uint32_t rank = read_u32(f.get());
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u32(f.get()));
        std::vector<float> data(static_cast<std::size_t>(numel(shape)));
        if (!data.empty() && std::fread(data.data(), sizeof(float), data.size(), f.get()) != data.size())
            throw std::runtime_error("unexpected end of weight file");
        if (name == "adam.step") {
            store.adam.step = static_cast<std::int64_t>(data.at(0));
        } else if (name.size() > 7 && name.substr(name.size() - 7) == ".adam_m") {
            store.adam.moments[name.substr(0, name.size() - 7)].m = std::move(data);
        } else if (name.size() > 7 && name.substr(name.size() - 7) == ".adam_v") {
            store.adam.moments[name.substr(0, name.size() - 7)].v = std::move(data);
        } else {
            store.add(name, Tensor::from_data(shape, std::move(data)));
        }
    }
    return store;
}

}  // namespace pmdm

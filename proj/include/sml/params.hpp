#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sml/errors.hpp"
#include "sml/tensor.hpp"

namespace sml {

// Ordered, named parameter registry. Trainable entries are weights/biases;
// non-trainable entries carry state like batch-norm running stats, which must
// persist in checkpoints but stay out of SGD, perturbations and directions.
template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
};

template <typename T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (by_name_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
        by_name_[name] = entries_.size();
        entries_.push_back(ParamEntry<T>{name, std::move(init), trainable});
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ArgumentError("unknown parameter: " + name);
        return entries_[it->second].value;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ArgumentError("unknown parameter: " + name);
        return entries_[it->second].value;
    }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    std::size_t trainable_scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.size();
        return n;
    }

    // Concatenation of all trainable entries, registry order.
    std::vector<T> flatten_trainable() const {
        std::vector<T> out;
        out.reserve(trainable_scalar_count());
        for (const auto& e : entries_)
            if (e.trainable) out.insert(out.end(), e.value.vec().begin(), e.value.vec().end());
        return out;
    }

    void assign_trainable(const std::vector<T>& flat) {
        if (flat.size() != trainable_scalar_count())
            throw ArgumentError("assign_trainable: length mismatch");
        std::size_t off = 0;
        for (auto& e : entries_) {
            if (!e.trainable) continue;
            std::memcpy(e.value.data(), flat.data() + off, e.value.size() * sizeof(T));
            off += e.value.size();
        }
    }

    // Which entry a position in the flattened trainable vector belongs to.
    const std::string& trainable_name_at(std::size_t flat_index) const {
        std::size_t off = 0;
        for (const auto& e : entries_) {
            if (!e.trainable) continue;
            if (flat_index < off + e.value.size()) return e.name;
            off += e.value.size();
        }
        throw ArgumentError("flat index out of range: " + std::to_string(flat_index));
    }

    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
        return out;
    }

private:
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

// ---- SMLW weight container ----
// magic "SMLW" | u32 version | u32 entry count | per entry:
//   u16 name length | name bytes | u8 rank | u32 dim per axis | f32 data
// All integers and floats little-endian. Values are stored as f32 regardless
// of the in-memory scalar type.

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}
inline std::uint16_t take_u16(std::istream& is) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw FormatError("weight file truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
inline std::uint32_t take_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("weight file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
inline float take_f32(std::istream& is) {
    std::uint32_t v = take_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace detail

template <typename T>
void save_weights(const std::string& path, const ParameterStore<T>& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write("SMLW", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(store.entries().size()));
    for (const auto& e : store.entries()) {
        if (e.name.size() > 0xffff) throw ArgumentError("parameter name too long: " + e.name);
        detail::put_u16(os, static_cast<std::uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        os.put(static_cast<char>(e.value.rank()));
        for (std::size_t d : e.value.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (std::size_t i = 0; i < e.value.size(); ++i)
            detail::put_f32(os, static_cast<float>(e.value[i]));
    }
    if (!os) throw DataError("write failed: " + path);
}

template <typename T>
ParameterStore<T> load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "SMLW")
        throw FormatError("not a weight file (bad magic): " + path);
    std::uint32_t version = detail::take_u32(is);
    if (version != 1) throw FormatError("unsupported weight file version " + std::to_string(version));
    std::uint32_t count = detail::take_u32(is);
    ParameterStore<T> store;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint16_t len = detail::take_u16(is);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("weight file truncated");
        int rank = is.get();
        if (rank < 0) throw FormatError("weight file truncated");
        Shape shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) d = detail::take_u32(is);
        Tensor<T> t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(detail::take_f32(is));
        store.add(name, std::move(t), true);
    }
    is.peek();
    if (!is.eof()) throw FormatError("trailing bytes in weight file: " + path);
    return store;
}

// Copy values from a loaded file into a live store. The name sets must match
// exactly; shapes are checked entry by entry. Trainability keeps whatever the
// live store says (the file does not record it).
template <typename T>
void load_weights_into(ParameterStore<T>& store, const std::string& path) {
    ParameterStore<T> file = load_weights<T>(path);
    if (file.entries().size() != store.entries().size())
        throw FormatError("weight file has " + std::to_string(file.entries().size()) +
                          " entries, model expects " + std::to_string(store.entries().size()));
    for (auto& e : store.entries()) {
        if (!file.has(e.name)) throw FormatError("weight file missing parameter: " + e.name);
        Tensor<T>& src = file.get(e.name);
        if (!(src.shape() == e.value.shape()))
            throw FormatError("shape mismatch for " + e.name + ": file " + shape_str(src.shape()) +
                              " vs model " + shape_str(e.value.shape()));
        e.value = std::move(src);
    }
}

}  // namespace sml

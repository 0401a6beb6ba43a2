// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors over a real scalar type, plus the flat binary
// container (`ATNT`) used to exchange tensors with the CLI. Certification
// paths use TensorT<double>; the training path uses TensorT<float>.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace attncalc {

template <typename R>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<R> data;

    TensorT() = default;
    explicit TensorT(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(elems(shape)), R(0));
    }
    TensorT(std::vector<int64_t> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != elems(shape))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    static int64_t elems(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }
    int64_t size() const { return static_cast<int64_t>(data.size()); }
    size_t rank() const { return shape.size(); }

    R& at(std::initializer_list<int64_t> idx) { return data[offset(idx)]; }
    R at(std::initializer_list<int64_t> idx) const { return data[offset(idx)]; }

    size_t offset(std::initializer_list<int64_t> idx) const {
        if (idx.size() != shape.size()) throw std::invalid_argument("index rank mismatch");
        size_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) {
            off = off * static_cast<size_t>(shape[k]) + static_cast<size_t>(i);
            ++k;
        }
        return off;
    }

    // Leading-axis slice: the i-th block of shape shape[1:].
    TensorT slice0(int64_t i) const {
        if (shape.empty()) throw std::invalid_argument("cannot slice a scalar");
        std::vector<int64_t> rest(shape.begin() + 1, shape.end());
        int64_t block = elems(rest);
        TensorT out(rest);
        std::copy(data.begin() + i * block, data.begin() + (i + 1) * block, out.data.begin());
        return out;
    }
    void set_slice0(int64_t i, const TensorT& t) {
        std::vector<int64_t> rest(shape.begin() + 1, shape.end());
        int64_t block = elems(rest);
        if (t.size() != block) throw std::invalid_argument("slice size mismatch");
        std::copy(t.data.begin(), t.data.end(), data.begin() + i * block);
    }

    TensorT reshaped(std::vector<int64_t> s) const {
        if (elems(s) != size()) throw std::invalid_argument("reshape element count mismatch");
        return TensorT(std::move(s), data);
    }

    template <typename R2>
    TensorT<R2> cast() const {
        TensorT<R2> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (R v : data) out.data.push_back(static_cast<R2>(v));
        return out;
    }

    bool finite() const {
        for (R v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using TensorValue = TensorT<double>;
using Tensor32 = TensorT<float>;

// Permute axes: out[idx] = in[idx ∘ perm], perm[k] = input axis placed at
// output position k.
template <typename R>
TensorT<R> transpose(const TensorT<R>& t, const std::vector<int64_t>& perm) {
    if (perm.size() != t.shape.size()) throw std::invalid_argument("perm rank mismatch");
    std::vector<int64_t> oshape(perm.size());
    for (size_t k = 0; k < perm.size(); ++k) oshape[k] = t.shape[static_cast<size_t>(perm[k])];
    TensorT<R> out(oshape);
    size_t r = perm.size();
    if (r == 0) {
        out.data = t.data;
        return out;
    }
    std::vector<int64_t> istrides(r, 1);
    for (size_t k = r - 1; k > 0; --k)
        istrides[k - 1] = istrides[k] * t.shape[k];
    std::vector<int64_t> idx(r, 0);
    for (size_t o = 0; o < t.data.size(); ++o) {
        int64_t ioff = 0;
        for (size_t k = 0; k < r; ++k) ioff += idx[k] * istrides[static_cast<size_t>(perm[k])];
        out.data[o] = t.data[static_cast<size_t>(ioff)];
        for (size_t k = r; k-- > 0;) {
            if (++idx[k] < oshape[k]) break;
            idx[k] = 0;
        }
    }
    return out;
}

// Contract a single axis pair: sum_k A[..., k at apos, ...] * B[..., k at bpos, ...].
// Result shape: A without apos followed by B without bpos.
template <typename R>
TensorT<R> contract_axis(const TensorT<R>& a, size_t apos, const TensorT<R>& b, size_t bpos) {
    if (apos >= a.rank() || bpos >= b.rank()) throw std::invalid_argument("contract axis out of range");
    if (a.shape[apos] != b.shape[bpos]) throw std::invalid_argument("contracted axes differ in size");
    // Move the contracted axis last in A, first in B, then do a flat matmul.
    std::vector<int64_t> pa, pb;
    for (size_t k = 0; k < a.rank(); ++k)
        if (k != apos) pa.push_back(static_cast<int64_t>(k));
    pa.push_back(static_cast<int64_t>(apos));
    pb.push_back(static_cast<int64_t>(bpos));
    for (size_t k = 0; k < b.rank(); ++k)
        if (k != bpos) pb.push_back(static_cast<int64_t>(k));
    TensorT<R> at = transpose(a, pa);
    TensorT<R> bt = transpose(b, pb);
    int64_t kdim = a.shape[apos];
    int64_t m = at.size() / kdim;
    int64_t n = bt.size() / kdim;
    std::vector<int64_t> oshape;
    for (size_t k = 0; k < a.rank(); ++k)
        if (k != apos) oshape.push_back(a.shape[k]);
    for (size_t k = 0; k < b.rank(); ++k)
        if (k != bpos) oshape.push_back(b.shape[k]);
    TensorT<R> out(oshape);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t k = 0; k < kdim; ++k) {
            R av = at.data[static_cast<size_t>(i * kdim + k)];
            if (av == R(0)) continue;
            const R* brow = bt.data.data() + k * n;
            R* orow = out.data.data() + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return out;
}

// ---- flat binary container ----------------------------------------------
// magic "ATNT", u32 rank, u32 dims..., little-endian f64 payload.

inline void write_atnt(const std::string& path, const TensorValue& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write("ATNT", 4);
    uint32_t rank = static_cast<uint32_t>(t.shape.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int64_t d : t.shape) {
        uint32_t v = static_cast<uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

inline TensorValue read_atnt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "ATNT", 4) != 0) throw std::runtime_error("bad tensor magic in " + path);
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        shape[i] = v;
    }
    TensorValue t(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated tensor file: " + path);
    return t;
}

// Relative error used by every numerical certificate:
// max |a-b| / (1e-12 + max(max|a|, max|b|)).
template <typename R>
double rel_err(const TensorT<R>& a, const TensorT<R>& b) {
    if (a.shape != b.shape) return 1e300;
    double maxdiff = 0, maxmag = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        maxdiff = std::max(maxdiff, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
        maxmag = std::max({maxmag, std::abs(static_cast<double>(a.data[i])),
                           std::abs(static_cast<double>(b.data[i]))});
    }
    return maxdiff / (1e-12 + maxmag);
}

template <typename R>
double rel_err(const std::vector<TensorT<R>>& a, const std::vector<TensorT<R>>& b) {
    if (a.size() != b.size()) return 1e300;
    double e = 0;
    for (size_t i = 0; i < a.size(); ++i) e = std::max(e, rel_err(a[i], b[i]));
    return e;
}

}  // namespace attncalc

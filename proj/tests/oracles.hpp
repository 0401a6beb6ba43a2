// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations, independent of the library's
// evaluation path. Expected values in the suites are produced by these.

#pragma once

#include <cmath>
#include <vector>

#include "attncalc/tensor.hpp"

namespace oracle {

using attncalc::TensorValue;

// softmax(Q K^T / sqrt(d)) V with plain loops.
inline TensorValue softmax_attention(const TensorValue& Q, const TensorValue& K,
                                     const TensorValue& V) {
    int64_t s = Q.shape[0], d = Q.shape[1], dv = V.shape[1];
    TensorValue out({s, dv});
    for (int64_t i = 0; i < s; ++i) {
        std::vector<double> logits(static_cast<size_t>(s));
        for (int64_t j = 0; j < s; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < d; ++k) acc += Q.at({i, k}) * K.at({j, k});
            logits[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(d));
        }
        double mx = -1e300;
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0;
        for (double& v : logits) {
            v = std::exp(v - mx);
            denom += v;
        }
        for (int64_t j = 0; j < s; ++j)
            for (int64_t k = 0; k < dv; ++k)
                out.at({i, k}) += logits[static_cast<size_t>(j)] / denom * V.at({j, k});
    }
    return out;
}

// Unnormalised-kernel attention: out_i = sum_j (phi(q_i).phi(k_j)) v_j / sum_j phi(q_i).phi(k_j)
inline TensorValue kernel_attention(const TensorValue& phiQ, const TensorValue& phiK,
                                    const TensorValue& V) {
    int64_t s = phiQ.shape[0], dp = phiQ.shape[1], dv = V.shape[1];
    TensorValue out({s, dv});
    for (int64_t i = 0; i < s; ++i) {
        double denom = 0;
        std::vector<double> w(static_cast<size_t>(s));
        for (int64_t j = 0; j < s; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < dp; ++k) acc += phiQ.at({i, k}) * phiK.at({j, k});
            w[static_cast<size_t>(j)] = acc;
            denom += acc;
        }
        for (int64_t j = 0; j < s; ++j)
            for (int64_t k = 0; k < dv; ++k)
                out.at({i, k}) += w[static_cast<size_t>(j)] / denom * V.at({j, k});
    }
    return out;
}

// Left fold of a step function over the leading axis.
template <typename Step>
std::pair<TensorValue, TensorValue> fold_left(const TensorValue& h0, const TensorValue& xs,
                                              Step step) {
    TensorValue h = h0;
    std::vector<int64_t> oshape = xs.shape;
    TensorValue ys;
    bool first = true;
    for (int64_t i = 0; i < xs.shape[0]; ++i) {
        auto [h2, y] = step(h, xs.slice0(i));
        h = h2;
        if (first) {
            oshape.erase(oshape.begin());
            std::vector<int64_t> full = y.shape;
            full.insert(full.begin(), xs.shape[0]);
            ys = TensorValue(full);
            first = false;
        }
        ys.set_slice0(i, y);
    }
    return {h, ys};
}

}  // namespace oracle

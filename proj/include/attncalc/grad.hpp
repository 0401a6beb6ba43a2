// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over diagrams. A forward pass caches every
// port value; the backward pass propagates cotangents box by box and
// accumulates parameter gradients per learnable id. Simd-with-residual
// backpropagates through the fold (storing the per-step residuals).

#pragma once

#include "attncalc/eval.hpp"

namespace attncalc {

template <typename R>
struct GradStoreT {
    // gradient-valued mirror of the parameter store
    std::map<std::string, ParamEntryT<R>> entries;

    ParamEntryT<R>& slot_like(const std::string& ua, const ParamEntryT<R>& like) {
        auto it = entries.find(ua);
        if (it != entries.end()) return it->second;
        ParamEntryT<R> zero;
        zero.kind = like.kind;
        if (like.kind == ParamEntryT<R>::Kind::Raw) {
            zero.raw = TensorT<R>(like.raw.shape);
        } else {
            for (const auto& L : like.mlp.layers)
                zero.mlp.layers.push_back({TensorT<R>(L.W.shape), TensorT<R>(L.b.shape), L.act});
        }
        return entries.emplace(ua, std::move(zero)).first->second;
    }
};

using GradStore = GradStoreT<double>;

namespace interp {

template <typename R>
struct BackResult {
    Tensors<R> in_cots;
};

template <typename R>
void backward_diagram(const Diagram& d, const Binding& binding, const ParamStoreT<R>& params,
                      const Tensors<R>& inputs, const Tensors<R>& out_cots, Tensors<R>& in_cots,
                      GradStoreT<R>& grads);

// y = stack(x); dx for one row given dy.
template <typename R>
std::vector<R> mlp_backward_row(const MlpT<R>& mlp, const std::vector<R>& x,
                                const std::vector<R>& dy, GradStoreT<R>& grads,
                                const std::string& ua, const ParamEntryT<R>& entry) {
    size_t L = mlp.layers.size();
    if (L == 0) return dy;  // identity
    std::vector<std::vector<R>> pre(L), act(L + 1);
    act[0] = x;
    for (size_t li = 0; li < L; ++li) {
        const auto& lay = mlp.layers[li];
        int64_t out = lay.W.shape[0], in = lay.W.shape[1];
        pre[li].assign(static_cast<size_t>(out), R(0));
        for (int64_t o = 0; o < out; ++o) {
            R acc = lay.b.data[static_cast<size_t>(o)];
            const R* row = lay.W.data.data() + o * in;
            for (int64_t i = 0; i < in; ++i) acc += row[i] * act[li][static_cast<size_t>(i)];
            pre[li][static_cast<size_t>(o)] = acc;
        }
        act[li + 1] = pre[li];
        if (lay.act)
            for (R& v : act[li + 1]) v = v > R(0) ? v : R(0);
    }
    ParamEntryT<R>& g = grads.slot_like(ua, entry);
    std::vector<R> delta = dy;
    for (size_t li = L; li-- > 0;) {
        const auto& lay = mlp.layers[li];
        int64_t out = lay.W.shape[0], in = lay.W.shape[1];
        auto& gW = g.mlp.layers[li].W;
        auto& gb = g.mlp.layers[li].b;
        // kill the gradient through this layer's own ReLU first
        if (lay.act)
            for (int64_t o = 0; o < out; ++o)
                if (pre[li][static_cast<size_t>(o)] <= R(0)) delta[static_cast<size_t>(o)] = R(0);
        std::vector<R> dx(static_cast<size_t>(in), R(0));
        for (int64_t o = 0; o < out; ++o) {
            R dv = delta[static_cast<size_t>(o)];
            gb.data[static_cast<size_t>(o)] += dv;
            const R* arow = act[li].data();
            R* gwrow = gW.data.data() + o * in;
            const R* wrow = lay.W.data.data() + o * in;
            for (int64_t i = 0; i < in; ++i) {
                gwrow[i] += dv * arow[i];
                dx[static_cast<size_t>(i)] += dv * wrow[i];
            }
        }
        delta = std::move(dx);
    }
    return delta;
}

// Sum `g` down to the shape of a trailing-suffix operand.
template <typename R>
TensorT<R> sum_to_suffix(const TensorT<R>& g, const std::vector<int64_t>& shape) {
    TensorT<R> out(shape);
    size_t bs = out.data.size();
    for (size_t i = 0; i < g.data.size(); ++i) out.data[i % bs] += g.data[i];
    return out;
}

template <typename R>
Tensors<R> backward_primitive(const Box& box, const Binding& binding, const Tensors<R>& ins,
                              const Tensors<R>& outs, const Tensors<R>& cots) {
    const std::string& op = box.op;
    auto scale_of = [&]() {
        return std::sqrt(static_cast<double>(resolve_or_throw(binding, box.attr_dim("scale"))));
    };
    if (op == "exp") {
        TensorT<R> g = cots[0];
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] *= outs[0].data[i];
        return {g};
    }
    if (op == "phi") {
        TensorT<R> g = cots[0];
        for (size_t i = 0; i < g.data.size(); ++i)
            g.data[i] *= ins[0].data[i] >= R(0) ? R(1) : outs[0].data[i];  // e^x below zero
        return {g};
    }
    if (op == "relu") {
        TensorT<R> g = cots[0];
        for (size_t i = 0; i < g.data.size(); ++i)
            if (ins[0].data[i] <= R(0)) g.data[i] = R(0);
        return {g};
    }
    if (op == "recip") {
        TensorT<R> g = cots[0];
        for (size_t i = 0; i < g.data.size(); ++i) {
            R x = ins[0].data[i];
            g.data[i] = -g.data[i] / (x * x);
        }
        return {g};
    }
    if (op == "neg") {
        TensorT<R> g = cots[0];
        for (auto& v : g.data) v = -v;
        return {g};
    }
    if (op == "scale") {
        TensorT<R> g = cots[0];
        R s = static_cast<R>(1.0 / scale_of());
        for (auto& v : g.data) v *= s;
        return {g};
    }
    if (op == "softmax" || op == "softmax_scaled") {
        double s = op == "softmax_scaled" ? scale_of() : 1.0;
        const TensorT<R>& y = outs[0];
        TensorT<R> g = cots[0];
        int64_t n = y.shape.empty() ? 1 : y.shape.back();
        int64_t rows = y.size() / n;
        for (int64_t r = 0; r < rows; ++r) {
            const R* yr = y.data.data() + r * n;
            R* gr = g.data.data() + r * n;
            double dot = 0;
            for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(gr[i]) * static_cast<double>(yr[i]);
            for (int64_t i = 0; i < n; ++i)
                gr[i] = static_cast<R>((static_cast<double>(gr[i]) - dot) * static_cast<double>(yr[i]) / s);
        }
        return {g};
    }
    if (op == "layer_norm") {
        const TensorT<R>&v = ins[0], &gamma = ins[1];
        double eps = box.has_attr("eps") ? box.attr_f("eps") : 1e-5;
        int64_t n = v.shape.back();
        int64_t rows = v.size() / n;
        TensorT<R> gv(v.shape), gg(ins[1].shape), gb(ins[2].shape);
        for (int64_t r = 0; r < rows; ++r) {
            const R* x = v.data.data() + r * n;
            const R* gy = cots[0].data.data() + r * n;
            R* gx = gv.data.data() + r * n;
            double mean = 0;
            for (int64_t i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
            mean /= n;
            double var = 0;
            for (int64_t i = 0; i < n; ++i) {
                double c = static_cast<double>(x[i]) - mean;
                var += c * c;
            }
            var /= n;
            double inv = 1.0 / std::sqrt(var + eps);
            double m1 = 0, m2 = 0;  // mean(ghat), mean(ghat*xhat)
            std::vector<double> xhat(static_cast<size_t>(n)), ghat(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) {
                xhat[static_cast<size_t>(i)] = (static_cast<double>(x[i]) - mean) * inv;
                ghat[static_cast<size_t>(i)] =
                    static_cast<double>(gy[i]) * static_cast<double>(gamma.data[static_cast<size_t>(i)]);
                m1 += ghat[static_cast<size_t>(i)];
                m2 += ghat[static_cast<size_t>(i)] * xhat[static_cast<size_t>(i)];
                gg.data[static_cast<size_t>(i)] +=
                    static_cast<R>(static_cast<double>(gy[i]) * xhat[static_cast<size_t>(i)]);
                gb.data[static_cast<size_t>(i)] += static_cast<R>(static_cast<double>(gy[i]));
            }
            m1 /= n;
            m2 /= n;
            for (int64_t i = 0; i < n; ++i)
                gx[i] = static_cast<R>(inv * (ghat[static_cast<size_t>(i)] - m1 -
                                              xhat[static_cast<size_t>(i)] * m2));
        }
        return {gv, gg, gb};
    }
    if (op == "add") {
        return {cots[0], sum_to_suffix(cots[0], ins[1].shape)};
    }
    if (op == "mul") {
        TensorT<R> ga = cots[0];
        size_t bs = ins[1].data.size();
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= ins[1].data[i % bs];
        TensorT<R> prod = cots[0];
        for (size_t i = 0; i < prod.data.size(); ++i) prod.data[i] *= ins[0].data[i];
        return {ga, sum_to_suffix(prod, ins[1].shape)};
    }
    if (op == "div") {
        TensorT<R> ga = cots[0];
        size_t bs = ins[1].data.size();
        for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] /= ins[1].data[i % bs];
        TensorT<R> gb_full = cots[0];
        for (size_t i = 0; i < gb_full.data.size(); ++i) {
            R bb = ins[1].data[i % bs];
            gb_full.data[i] *= -ins[0].data[i] / (bb * bb);
        }
        return {ga, sum_to_suffix(gb_full, ins[1].shape)};
    }
    if (op == "div_lead" || op == "mul_lead") {
        const TensorT<R>& b2 = ins[1];
        int64_t block = ins[0].size() / std::max<int64_t>(1, b2.size());
        TensorT<R> ga = cots[0];
        TensorT<R> gb(b2.shape);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            size_t k = i / static_cast<size_t>(block);
            R bv = b2.data[k];
            if (op == "div_lead") {
                gb.data[k] += -cots[0].data[i] * ins[0].data[i] / (bv * bv);
                ga.data[i] /= bv;
            } else {
                gb.data[k] += cots[0].data[i] * ins[0].data[i];
                ga.data[i] *= bv;
            }
        }
        return {ga, gb};
    }
    if (op == "concat") {
        int64_t total = cots[0].shape.back();
        int64_t rows = ins[0].size() / ins[0].shape.back();
        Tensors<R> gs;
        for (const auto& part : ins) gs.emplace_back(part.shape);
        for (int64_t r = 0; r < rows; ++r) {
            int64_t off = 0;
            for (size_t k = 0; k < ins.size(); ++k) {
                int64_t w = ins[k].shape.back();
                std::copy(cots[0].data.begin() + r * total + off,
                          cots[0].data.begin() + r * total + off + w, gs[k].data.begin() + r * w);
                off += w;
            }
        }
        return gs;
    }
    if (op == "broadcast") {
        TensorT<R> g(ins[0].shape);
        int64_t k = cots[0].shape[0];
        int64_t block = ins[0].size();
        for (int64_t i = 0; i < k; ++i)
            for (int64_t j = 0; j < block; ++j)
                g.data[static_cast<size_t>(j)] += cots[0].data[static_cast<size_t>(i * block + j)];
        return {g};
    }
    if (op == "pack2") {
        return {cots[0].slice0(0), cots[0].slice0(1)};
    }
    if (op == "unpack2") {
        TensorT<R> g(ins[0].shape);
        g.set_slice0(0, cots[0]);
        g.set_slice0(1, cots[1]);
        return {g};
    }
    if (op == "prefix_outer") {
        const TensorT<R>&k = ins[0], &v = ins[1];
        int64_t s = k.shape[0], a = k.shape[1], bdim = v.shape[1];
        TensorT<R> gk(k.shape), gv(v.shape);
        // suffix-sum of the output cotangent, then contract per position
        TensorT<R> G({a, bdim});
        for (int64_t i = s - 1; i >= 0; --i) {
            for (int64_t x = 0; x < a; ++x)
                for (int64_t y = 0; y < bdim; ++y) G.at({x, y}) += cots[0].at({i, x, y});
            for (int64_t x = 0; x < a; ++x) {
                R acc = R(0);
                for (int64_t y = 0; y < bdim; ++y) acc += G.at({x, y}) * v.at({i, y});
                gk.at({i, x}) = acc;
            }
            for (int64_t y = 0; y < bdim; ++y) {
                R acc = R(0);
                for (int64_t x = 0; x < a; ++x) acc += G.at({x, y}) * k.at({i, x});
                gv.at({i, y}) = acc;
            }
        }
        return {gk, gv};
    }
    if (op == "prefix_sum0") {
        TensorT<R> g = cots[0];
        int64_t s = g.shape[0];
        int64_t block = g.size() / s;
        for (int64_t i = s - 2; i >= 0; --i)
            for (int64_t j = 0; j < block; ++j)
                g.data[static_cast<size_t>(i * block + j)] +=
                    g.data[static_cast<size_t>((i + 1) * block + j)];
        return {g};
    }
    if (op == "shift_inject") {
        const TensorT<R>& glanes_out = cots[1];
        const TensorT<R>& gres = cots[0];
        int64_t k = ins[1].shape[0];
        TensorT<R> gu = glanes_out.slice0(0);
        TensorT<R> glanes(ins[1].shape);
        for (int64_t i = 1; i < k; ++i) glanes.set_slice0(i - 1, glanes_out.slice0(i));
        // residual output was lanes[k-1]
        TensorT<R> last = glanes.slice0(k - 1);
        for (size_t i = 0; i < last.data.size(); ++i) last.data[i] += gres.data[i];
        glanes.set_slice0(k - 1, last);
        return {gu, glanes};
    }
    if (op == "gaussian_window") {
        double mu = static_cast<double>(ins[0].data[0]);
        double sd = static_cast<double>(ins[1].data[0]);
        double gmu = 0, gsd = 0;
        int64_t n = outs[0].shape[0];
        for (int64_t j = 0; j < n; ++j) {
            double w = static_cast<double>(outs[0].data[static_cast<size_t>(j)]);
            double gj = static_cast<double>(cots[0].data[static_cast<size_t>(j)]);
            double z = static_cast<double>(j) - mu;
            gmu += gj * w * z / (sd * sd);
            gsd += gj * w * z * z / (sd * sd * sd);
        }
        TensorT<R> g0(std::vector<int64_t>{}), g1(std::vector<int64_t>{});
        g0.data[0] = static_cast<R>(gmu);
        g1.data[0] = static_cast<R>(gsd);
        return {g0, g1};
    }
    // constants and masks: no inputs
    if (op == "ones" || op == "zeros" || op == "const_scalar" || op == "mask_causal" ||
        op == "mask_ones" || op == "pos_enc")
        return {};
    throw std::runtime_error("grad: unknown primitive op " + op);
}

template <typename R>
Tensors<R> backward_box(const Box& b, const Binding& binding, const ParamStoreT<R>& params,
                        const Tensors<R>& ins, const Tensors<R>& outs, const Tensors<R>& cots,
                        GradStoreT<R>& grads) {
    switch (b.kind) {
        case BoxKind::Copy: {
            TensorT<R> g = cots[0];
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += cots[1].data[i];
            return {g};
        }
        case BoxKind::Delete: return {TensorT<R>(ins[0].shape)};
        case BoxKind::Reverse: {
            Box fwd = b;  // reversing is its own inverse
            return {eval_box(fwd, binding, params, {cots[0]}, nullptr)[0]};
        }
        case BoxKind::Reshape: {
            std::vector<int64_t> perm =
                b.has_attr("perm") ? b.attr_iv("perm") : std::vector<int64_t>{};
            if (perm.empty())
                for (size_t i = 0; i < ins[0].rank(); ++i) perm.push_back(static_cast<int64_t>(i));
            // forward: y = reint(transpose(x, perm)); backward: inverse ops
            std::vector<int64_t> tshape(perm.size());
            for (size_t i = 0; i < perm.size(); ++i)
                tshape[i] = ins[0].shape[static_cast<size_t>(perm[i])];
            TensorT<R> gt = cots[0].reshaped(tshape);
            std::vector<int64_t> inv(perm.size());
            for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
            return {transpose(gt, inv)};
        }
        case BoxKind::Contract: {
            if (b.attr_i("lpos") < 0) {
                // tensor product: gA[i] = sum_j g[i,j] B[j]; gB[j] = sum_i g[i,j] A[i]
                const TensorT<R>&A = ins[0], &B = ins[1];
                TensorT<R> gA(A.shape), gB(B.shape);
                int64_t nb = B.size();
                for (int64_t i = 0; i < A.size(); ++i)
                    for (int64_t j = 0; j < nb; ++j) {
                        R g = cots[0].data[static_cast<size_t>(i * nb + j)];
                        gA.data[static_cast<size_t>(i)] += g * B.data[static_cast<size_t>(j)];
                        gB.data[static_cast<size_t>(j)] += g * A.data[static_cast<size_t>(i)];
                    }
                return {gA, gB};
            }
            size_t lp = static_cast<size_t>(b.attr_i("lpos"));
            size_t rp = static_cast<size_t>(b.attr_i("rpos"));
            const TensorT<R>&A = ins[0], &B = ins[1];
            int64_t k = A.shape[lp];
            // A' = [I, k], B' = [k, J]; g = [I, J]
            std::vector<int64_t> pa, pb;
            for (size_t i = 0; i < A.rank(); ++i)
                if (i != lp) pa.push_back(static_cast<int64_t>(i));
            pa.push_back(static_cast<int64_t>(lp));
            pb.push_back(static_cast<int64_t>(rp));
            for (size_t i = 0; i < B.rank(); ++i)
                if (i != rp) pb.push_back(static_cast<int64_t>(i));
            TensorT<R> At = transpose(A, pa);  // [I,k] flat
            TensorT<R> Bt = transpose(B, pb);  // [k,J] flat
            int64_t I = At.size() / k, J = Bt.size() / k;
            const TensorT<R>& g = cots[0];
            // gA'[I,k] = g[I,J] * B'[k,J]^T ; gB'[k,J] = A'[I,k]^T * g
            TensorT<R> gAt(std::vector<int64_t>{I, k}), gBt(std::vector<int64_t>{k, J});
            for (int64_t i = 0; i < I; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    R acc = R(0);
                    const R* grow = g.data.data() + i * J;
                    const R* brow = Bt.data.data() + kk * J;
                    for (int64_t j = 0; j < J; ++j) acc += grow[j] * brow[j];
                    gAt.data[static_cast<size_t>(i * k + kk)] = acc;
                }
            for (int64_t kk = 0; kk < k; ++kk)
                for (int64_t j = 0; j < J; ++j) {
                    R acc = R(0);
                    for (int64_t i = 0; i < I; ++i)
                        acc += At.data[static_cast<size_t>(i * k + kk)] *
                               g.data[static_cast<size_t>(i * J + j)];
                    gBt.data[static_cast<size_t>(kk * J + j)] = acc;
                }
            // un-permute
            std::vector<int64_t> at_shape, bt_shape;
            for (size_t i = 0; i < A.rank(); ++i)
                if (i != lp) at_shape.push_back(A.shape[i]);
            at_shape.push_back(k);
            std::vector<int64_t> inva(pa.size());
            for (size_t i = 0; i < pa.size(); ++i) inva[static_cast<size_t>(pa[i])] = static_cast<int64_t>(i);
            TensorT<R> gA = transpose(gAt.reshaped(at_shape), inva);
            bt_shape.push_back(k);
            for (size_t i = 0; i < B.rank(); ++i)
                if (i != rp) bt_shape.push_back(B.shape[i]);
            std::vector<int64_t> invb(pb.size());
            for (size_t i = 0; i < pb.size(); ++i) invb[static_cast<size_t>(pb[i])] = static_cast<int64_t>(i);
            TensorT<R> gB = transpose(gBt.reshaped(bt_shape), invb);
            return {gA, gB};
        }
        case BoxKind::Simd: {
            const Diagram& body = *b.body;
            int64_t lanes = resolve_or_throw(binding, b.attr_dim("index"));
            bool res = b.simd_residual();
            Tensors<R> in_gs;
            for (size_t p = 0; p < ins.size(); ++p) in_gs.emplace_back(ins[p].shape);
            if (!res) {
                for (int64_t lane = 0; lane < lanes; ++lane) {
                    Tensors<R> lane_ins, lane_cots;
                    for (size_t p = 0; p < ins.size(); ++p) lane_ins.push_back(ins[p].slice0(lane));
                    for (size_t p = 0; p < cots.size(); ++p) lane_cots.push_back(cots[p].slice0(lane));
                    Tensors<R> lane_gs;
                    backward_diagram(body, binding, params, lane_ins, lane_cots, lane_gs, grads);
                    for (size_t p = 0; p < ins.size(); ++p) in_gs[p].set_slice0(lane, lane_gs[p]);
                }
                return in_gs;
            }
            // fold: forward to collect residuals, then backward through time
            std::vector<TensorT<R>> residuals(static_cast<size_t>(lanes) + 1);
            residuals[0] = ins[0];
            for (int64_t lane = 0; lane < lanes; ++lane) {
                Tensors<R> lane_ins;
                lane_ins.push_back(residuals[static_cast<size_t>(lane)]);
                for (size_t p = 1; p < ins.size(); ++p) lane_ins.push_back(ins[p].slice0(lane));
                Tensors<R> lane_outs = eval_diagram(body, binding, params, lane_ins, nullptr);
                residuals[static_cast<size_t>(lane) + 1] = lane_outs[0];
            }
            TensorT<R> gres = cots[0];
            for (int64_t lane = lanes - 1; lane >= 0; --lane) {
                Tensors<R> lane_ins, lane_cots;
                lane_ins.push_back(residuals[static_cast<size_t>(lane)]);
                for (size_t p = 1; p < ins.size(); ++p) lane_ins.push_back(ins[p].slice0(lane));
                lane_cots.push_back(gres);
                for (size_t p = 1; p < cots.size(); ++p) lane_cots.push_back(cots[p].slice0(lane));
                Tensors<R> lane_gs;
                backward_diagram(body, binding, params, lane_ins, lane_cots, lane_gs, grads);
                gres = lane_gs[0];
                for (size_t p = 1; p < ins.size(); ++p) in_gs[p].set_slice0(lane, lane_gs[p]);
            }
            in_gs[0] = gres;
            return in_gs;
        }
        case BoxKind::Primitive: return backward_primitive(b, binding, ins, outs, cots);
        case BoxKind::Learnable: {
            const ParamEntryT<R>& e = params.at(b.op);
            if (b.ins.empty()) {
                ParamEntryT<R>& g = grads.slot_like(b.op, e);
                for (size_t i = 0; i < g.raw.data.size(); ++i) g.raw.data[i] += cots[0].data[i];
                return {};
            }
            UaSignature sig = ua_signature(b, binding);
            int64_t rows = sig.rows(), fin = sig.fin(), gout = sig.gout();
            Tensors<R> in_gs;
            for (size_t p = 0; p < ins.size(); ++p) in_gs.emplace_back(ins[p].shape);
            std::vector<R> x(static_cast<size_t>(fin)), dy(static_cast<size_t>(gout));
            for (int64_t r = 0; r < rows; ++r) {
                int64_t off = 0;
                for (size_t ii = 0; ii < ins.size(); ++ii) {
                    int64_t f = sig.in_feats[ii];
                    for (int64_t j = 0; j < f; ++j)
                        x[static_cast<size_t>(off + j)] = ins[ii].data[static_cast<size_t>(r * f + j)];
                    off += f;
                }
                off = 0;
                for (size_t oi = 0; oi < cots.size(); ++oi) {
                    int64_t f = sig.out_feats[oi];
                    for (int64_t j = 0; j < f; ++j)
                        dy[static_cast<size_t>(off + j)] = cots[oi].data[static_cast<size_t>(r * f + j)];
                    off += f;
                }
                std::vector<R> dx = mlp_backward_row(e.mlp, x, dy, grads, b.op, e);
                off = 0;
                for (size_t ii = 0; ii < ins.size(); ++ii) {
                    int64_t f = sig.in_feats[ii];
                    for (int64_t j = 0; j < f; ++j)
                        in_gs[ii].data[static_cast<size_t>(r * f + j)] = dx[static_cast<size_t>(off + j)];
                    off += f;
                }
            }
            return in_gs;
        }
    }
    throw std::logic_error("grad: unreachable box kind");
}

template <typename R>
void backward_diagram(const Diagram& d, const Binding& binding, const ParamStoreT<R>& params,
                      const Tensors<R>& inputs, const Tensors<R>& out_cots, Tensors<R>& in_cots,
                      GradStoreT<R>& grads) {
    // forward pass caching all port values
    std::map<std::pair<int32_t, uint32_t>, TensorT<R>> vals;
    for (const auto& w : d.wires)
        if (w.src.boundary()) vals[{kBoundary, w.src.port}] = inputs[w.src.port];
    std::vector<BoxId> order = d.topo_order();
    std::map<BoxId, Tensors<R>> box_ins, box_outs;
    for (BoxId id : order) {
        const Box& b = d.box(id);
        Tensors<R> ins;
        for (uint32_t p = 0; p < b.ins.size(); ++p) {
            const Wire* w = d.wire_to(port_of(id, p));
            ins.push_back(vals.at({w->src.box, w->src.port}));
        }
        Tensors<R> outs = eval_box(b, binding, params, ins, nullptr);
        for (uint32_t p = 0; p < outs.size(); ++p)
            vals[{static_cast<int32_t>(id), p}] = outs[p];
        box_ins[id] = std::move(ins);
        box_outs[id] = std::move(outs);
    }

    // cotangent per producer port
    std::map<std::pair<int32_t, uint32_t>, TensorT<R>> cot;
    for (const auto& w : d.wires)
        if (w.dst.boundary()) cot[{w.src.box, w.src.port}] = out_cots[w.dst.port];

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        BoxId id = *it;
        const Box& b = d.box(id);
        Tensors<R> out_gs;
        for (uint32_t p = 0; p < b.outs.size(); ++p) {
            auto c = cot.find({static_cast<int32_t>(id), p});
            if (c != cot.end())
                out_gs.push_back(c->second);
            else
                out_gs.emplace_back(box_outs[id][p].shape);  // zero (deleted path)
        }
        Tensors<R> in_gs = backward_box(b, binding, params, box_ins[id], box_outs[id], out_gs, grads);
        for (uint32_t p = 0; p < b.ins.size(); ++p) {
            const Wire* w = d.wire_to(port_of(id, p));
            cot[{w->src.box, w->src.port}] = std::move(in_gs[p]);
        }
    }

    in_cots.clear();
    for (uint32_t i = 0; i < d.ins.size(); ++i) {
        auto c = cot.find({kBoundary, i});
        if (c != cot.end())
            in_cots.push_back(c->second);
        else
            in_cots.emplace_back(d.ins[i].resolve(binding));
    }
}

}  // namespace interp

template <typename R>
struct GradResultT {
    std::vector<TensorT<R>> input_grads;
    GradStoreT<R> params;
};
using GradResult = GradResultT<double>;

template <typename R>
GradResultT<R> grad_t(const Diagram& d, const Binding& binding, const ParamStoreT<R>& params,
                      const std::vector<TensorT<R>>& inputs,
                      const std::vector<TensorT<R>>& out_cots) {
    GradResultT<R> res;
    interp::backward_diagram<R>(d, binding, params, inputs, out_cots, res.input_grads, res.params);
    return res;
}

inline GradResult grad(const Diagram& d, const Binding& binding, const ParamStore& params,
                       const std::vector<TensorValue>& inputs,
                       const std::vector<TensorValue>& out_cots) {
    return grad_t<double>(d, binding, params, inputs, out_cots);
}

}  // namespace attncalc

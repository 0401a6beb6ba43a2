// SPDX-License-Identifier: Apache-2.0
//
// Dense reference semantics for diagrams: forward evaluation, the
// primitive table, and instrumented complexity profiling.
//
// Simd without a residual evaluates each lane independently; with a
// residual it is a left-to-right fold threading the residual tensor.

#pragma once

#include <cmath>

#include "attncalc/diagram.hpp"
#include "attncalc/params.hpp"
#include "attncalc/tensor.hpp"

namespace attncalc {

struct UnboundDim : std::runtime_error {
    explicit UnboundDim(const std::string& what) : std::runtime_error(what) {}
};
struct DomainFault : std::runtime_error {
    explicit DomainFault(const std::string& what) : std::runtime_error(what) {}
};

struct Profile {
    int64_t flops = 0;     // multiply-add count
    int64_t max_live = 0;  // largest single tensor, in elements
    std::map<std::string, int64_t> per_box;

    void add(const std::string& op, int64_t f) {
        flops += f;
        per_box[op] += f;
    }
    void note(int64_t numel) { max_live = std::max(max_live, numel); }
};

namespace interp {

template <typename R>
using Tensors = std::vector<TensorT<R>>;

inline int64_t resolve_or_throw(const Binding& b, const DimSym& d) {
    auto v = b.try_resolve(d);
    if (!v) throw UnboundDim("unbound dimension symbol: " + d.name);
    return *v;
}

template <typename R>
void check_finite(const std::string& op, const Tensors<R>& ins) {
    for (const auto& t : ins)
        if (!t.finite()) throw DomainFault("non-finite input to primitive '" + op + "'");
}

// ---- primitive evaluation ---------------------------------------------------

template <typename R>
Tensors<R> eval_primitive(const Box& box, const Binding& binding, const Tensors<R>& ins,
                          Profile* prof) {
    const std::string& op = box.op;
    check_finite(op, ins);
    auto out_shape = [&](size_t i) { return box.outs[i].resolve(binding); };
    auto scale_of = [&]() {
        return std::sqrt(static_cast<double>(resolve_or_throw(binding, box.attr_dim("scale"))));
    };
    auto addf = [&](int64_t f) {
        if (prof) prof->add(op, f);
    };

    if (op == "exp" || op == "phi" || op == "relu" || op == "recip" || op == "neg") {
        TensorT<R> out = ins[0];
        for (auto& v : out.data) {
            double x = static_cast<double>(v);
            double y = 0;
            if (op == "exp") y = std::exp(x);
            else if (op == "phi") y = x >= 0 ? x + 1.0 : std::exp(x);  // ELU(x)+1
            else if (op == "relu") y = x > 0 ? x : 0.0;
            else if (op == "recip") y = 1.0 / x;
            else y = -x;
            v = static_cast<R>(y);
        }
        addf(out.size());
        return {out};
    }
    if (op == "scale") {
        TensorT<R> out = ins[0];
        R s = static_cast<R>(1.0 / scale_of());
        for (auto& v : out.data) v *= s;
        addf(out.size());
        return {out};
    }
    if (op == "softmax" || op == "softmax_scaled") {
        TensorT<R> out = ins[0];
        double s = op == "softmax_scaled" ? scale_of() : 1.0;
        bool causal = box.has_attr("causal") && box.attr_i("causal") != 0;
        int64_t n = out.shape.empty() ? 1 : out.shape.back();
        int64_t rows = out.size() / n;
        int64_t qdim = causal && out.shape.size() >= 2 ? out.shape[out.shape.size() - 2] : 1;
        for (int64_t r = 0; r < rows; ++r) {
            R* row = out.data.data() + r * n;
            int64_t qi = causal ? r % qdim : 0;
            int64_t limit = causal ? std::min<int64_t>(qi + 1, n) : n;
            double mx = -1e300;
            for (int64_t i = 0; i < limit; ++i)
                mx = std::max(mx, static_cast<double>(row[i]) / s);
            double denom = 0;
            for (int64_t i = 0; i < n; ++i) {
                double e = i < limit ? std::exp(static_cast<double>(row[i]) / s - mx) : 0.0;
                row[i] = static_cast<R>(e);
                denom += e;
            }
            for (int64_t i = 0; i < n; ++i) row[i] = static_cast<R>(static_cast<double>(row[i]) / denom);
        }
        addf(4 * out.size());
        return {out};
    }
    if (op == "layer_norm") {
        const TensorT<R>&v = ins[0], &gamma = ins[1], &beta = ins[2];
        double eps = box.has_attr("eps") ? box.attr_f("eps") : 1e-5;
        int64_t n = v.shape.back();
        int64_t rows = v.size() / n;
        TensorT<R> out = v;
        for (int64_t r = 0; r < rows; ++r) {
            const R* x = v.data.data() + r * n;
            R* y = out.data.data() + r * n;
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
            for (int64_t i = 0; i < n; ++i)
                y[i] = static_cast<R>((static_cast<double>(x[i]) - mean) * inv *
                                          static_cast<double>(gamma.data[static_cast<size_t>(i)]) +
                                      static_cast<double>(beta.data[static_cast<size_t>(i)]));
        }
        addf(8 * v.size());
        return {out};
    }
    if (op == "pos_enc") {
        auto sh = out_shape(0);
        int64_t s = sh[0], dm = sh[1];
        TensorT<R> out(sh);
        for (int64_t i = 0; i < s; ++i)
            for (int64_t k1 = 1; k1 <= dm; ++k1) {  // k is 1-based
                double v = (k1 % 2 == 1)
                               ? std::cos(i * std::pow(10000.0, -static_cast<double>(k1 - 1) / dm))
                               : std::sin(i * std::pow(10000.0, -static_cast<double>(k1) / dm));
                out.at({i, k1 - 1}) = static_cast<R>(v);
            }
        addf(out.size());
        return {out};
    }
    if (op == "ones" || op == "zeros") {
        TensorT<R> out(out_shape(0));
        if (op == "ones") std::fill(out.data.begin(), out.data.end(), R(1));
        addf(out.size());
        return {out};
    }
    if (op == "const_scalar") {
        TensorT<R> out(std::vector<int64_t>{});
        out.data[0] = static_cast<R>(box.attr_f("value"));
        return {out};
    }
    if (op == "mask_causal" || op == "mask_ones") {
        auto sh = out_shape(0);
        TensorT<R> out(sh);
        for (int64_t i = 0; i < sh[0]; ++i)
            for (int64_t j = 0; j < sh[1]; ++j)
                out.at({i, j}) = (op == "mask_ones" || j <= i) ? R(1) : R(0);
        addf(out.size());
        return {out};
    }
    if (op == "gaussian_window") {
        double mu = static_cast<double>(ins[0].data[0]);
        double sd = static_cast<double>(ins[1].data[0]);
        auto sh = out_shape(0);
        TensorT<R> out(sh);
        for (int64_t j = 0; j < sh[0]; ++j) {
            double z = (static_cast<double>(j) - mu) / sd;
            out.data[static_cast<size_t>(j)] = static_cast<R>(std::exp(-0.5 * z * z));
        }
        addf(4 * out.size());
        return {out};
    }
    if (op == "add" || op == "mul" || op == "div") {
        TensorT<R> out = ins[0];
        const TensorT<R>& b = ins[1];
        size_t bs = b.data.size();
        for (size_t i = 0; i < out.data.size(); ++i) {
            R rhs = b.data[i % bs];
            if (op == "add") out.data[i] += rhs;
            else if (op == "mul") out.data[i] *= rhs;
            else out.data[i] /= rhs;
        }
        addf(out.size());
        return {out};
    }
    if (op == "div_lead" || op == "mul_lead") {
        TensorT<R> out = ins[0];
        const TensorT<R>& b2 = ins[1];
        int64_t block = out.size() / std::max<int64_t>(1, b2.size());
        for (size_t i = 0; i < out.data.size(); ++i) {
            R rhs = b2.data[i / static_cast<size_t>(block)];
            if (op == "div_lead") out.data[i] /= rhs;
            else out.data[i] *= rhs;
        }
        addf(out.size());
        return {out};
    }
    if (op == "concat") {
        auto sh = out_shape(0);
        int64_t total = sh.back();
        int64_t rows = ins[0].size() / ins[0].shape.back();
        TensorT<R> out(sh);
        for (int64_t r = 0; r < rows; ++r) {
            int64_t off = 0;
            for (const auto& part : ins) {
                int64_t w = part.shape.back();
                std::copy(part.data.begin() + r * w, part.data.begin() + (r + 1) * w,
                          out.data.begin() + r * total + off);
                off += w;
            }
        }
        return {out};
    }
    if (op == "broadcast") {
        int64_t k = resolve_or_throw(binding, box.attr_dim("index"));
        std::vector<int64_t> sh = ins[0].shape;
        sh.insert(sh.begin(), k);
        TensorT<R> out(sh);
        for (int64_t i = 0; i < k; ++i)
            std::copy(ins[0].data.begin(), ins[0].data.end(), out.data.begin() + i * ins[0].size());
        return {out};
    }
    if (op == "pack2") {
        std::vector<int64_t> sh = ins[0].shape;
        sh.insert(sh.begin(), 2);
        TensorT<R> out(sh);
        std::copy(ins[0].data.begin(), ins[0].data.end(), out.data.begin());
        std::copy(ins[1].data.begin(), ins[1].data.end(), out.data.begin() + ins[0].size());
        return {out};
    }
    if (op == "unpack2") {
        TensorT<R> a = ins[0].slice0(0), b = ins[0].slice0(1);
        return {a, b};
    }
    if (op == "prefix_outer") {
        const TensorT<R>&k = ins[0], &v = ins[1];
        int64_t s = k.shape[0], a = k.shape[1], bdim = v.shape[1];
        TensorT<R> out({s, a, bdim});
        std::vector<double> acc(static_cast<size_t>(a * bdim), 0.0);
        for (int64_t i = 0; i < s; ++i) {
            for (int64_t x = 0; x < a; ++x)
                for (int64_t y = 0; y < bdim; ++y)
                    acc[static_cast<size_t>(x * bdim + y)] +=
                        static_cast<double>(k.at({i, x})) * static_cast<double>(v.at({i, y}));
            for (int64_t x = 0; x < a; ++x)
                for (int64_t y = 0; y < bdim; ++y)
                    out.at({i, x, y}) = static_cast<R>(acc[static_cast<size_t>(x * bdim + y)]);
        }
        addf(s * a * bdim);
        return {out};
    }
    if (op == "prefix_sum0") {
        TensorT<R> out = ins[0];
        int64_t s = out.shape[0];
        int64_t block = out.size() / s;
        for (int64_t i = 1; i < s; ++i)
            for (int64_t j = 0; j < block; ++j)
                out.data[static_cast<size_t>(i * block + j)] +=
                    out.data[static_cast<size_t>((i - 1) * block + j)];
        addf(out.size());
        return {out};
    }
    if (op == "shift_inject") {
        const TensorT<R>&u = ins[0], &lanes = ins[1];
        int64_t k = lanes.shape[0];
        TensorT<R> res = lanes.slice0(k - 1);
        TensorT<R> out = lanes;
        out.set_slice0(0, u);
        for (int64_t i = 1; i < k; ++i) out.set_slice0(i, lanes.slice0(i - 1));
        addf(out.size());
        return {res, out};
    }
    throw std::runtime_error("eval: unknown primitive op " + op);
}

// ---- learnable evaluation -----------------------------------------------------

template <typename R>
Tensors<R> eval_learnable(const Box& box, const Binding& binding, const ParamStoreT<R>& params,
                          const Tensors<R>& ins, Profile* prof) {
    const ParamEntryT<R>& e = params.at(box.op);
    if (box.ins.empty()) {
        if (e.kind != ParamEntryT<R>::Kind::Raw)
            throw MissingParams("learnable '" + box.op + "' is a tensor box but holds an mlp");
        std::vector<int64_t> want = box.outs[0].resolve(binding);
        if (e.raw.shape != want)
            throw ShapeFault("parameter tensor '" + box.op + "' shape mismatch");
        if (prof) prof->note(e.raw.size());
        return {e.raw};
    }
    if (e.kind != ParamEntryT<R>::Kind::Mlp)
        throw MissingParams("learnable '" + box.op + "' is an mlp box but holds a raw tensor");
    UaSignature sig = ua_signature(box, binding);
    int64_t rows = sig.rows(), fin = sig.fin(), gout = sig.gout();
    if (!e.mlp.layers.empty() &&
        (e.mlp.in_width() != fin || e.mlp.out_width() != gout))
        throw ShapeFault("mlp '" + box.op + "' widths do not match the box signature");
    if (e.mlp.layers.empty() && fin != gout)
        throw ShapeFault("identity mlp '" + box.op + "' needs equal in/out widths");

    Tensors<R> outs;
    for (size_t oi = 0; oi < box.outs.size(); ++oi) outs.emplace_back(box.outs[oi].resolve(binding));
    std::vector<R> x(static_cast<size_t>(fin));
    for (int64_t r = 0; r < rows; ++r) {
        int64_t off = 0;
        for (size_t ii = 0; ii < ins.size(); ++ii) {
            int64_t f = sig.in_feats[ii];
            for (int64_t j = 0; j < f; ++j)
                x[static_cast<size_t>(off + j)] = ins[ii].data[static_cast<size_t>(r * f + j)];
            off += f;
        }
        std::vector<R> y = e.mlp.forward(x);
        if (static_cast<int64_t>(y.size()) != gout) throw ShapeFault("mlp output width mismatch");
        off = 0;
        for (size_t oi = 0; oi < outs.size(); ++oi) {
            int64_t f = sig.out_feats[oi];
            for (int64_t j = 0; j < f; ++j)
                outs[oi].data[static_cast<size_t>(r * f + j)] = y[static_cast<size_t>(off + j)];
            off += f;
        }
    }
    if (prof) {
        int64_t per_row = 0;
        for (const auto& L : e.mlp.layers) per_row += L.W.shape[0] * (L.W.shape[1] + 1);
        prof->add("ua", rows * per_row);
    }
    return outs;
}

// ---- diagram evaluation ---------------------------------------------------------

template <typename R>
Tensors<R> eval_diagram(const Diagram& d, const Binding& binding, const ParamStoreT<R>& params,
                        const Tensors<R>& inputs, Profile* prof = nullptr);

template <typename R>
Tensors<R> eval_box(const Box& b, const Binding& binding, const ParamStoreT<R>& params,
                    const Tensors<R>& ins, Profile* prof) {
    switch (b.kind) {
        case BoxKind::Copy: return {ins[0], ins[0]};
        case BoxKind::Delete: return {};
        case BoxKind::Reverse: {
            size_t axis = static_cast<size_t>(b.attr_i("axis"));
            TensorT<R> out = ins[0];
            int64_t n = out.shape[axis];
            int64_t outer = 1, inner = 1;
            for (size_t i = 0; i < axis; ++i) outer *= out.shape[i];
            for (size_t i = axis + 1; i < out.rank(); ++i) inner *= out.shape[i];
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < inner; ++j)
                        out.data[static_cast<size_t>((o * n + i) * inner + j)] =
                            ins[0].data[static_cast<size_t>((o * n + (n - 1 - i)) * inner + j)];
            return {out};
        }
        case BoxKind::Reshape: {
            std::vector<int64_t> perm =
                b.has_attr("perm") ? b.attr_iv("perm") : std::vector<int64_t>{};
            if (perm.empty())
                for (size_t i = 0; i < ins[0].rank(); ++i) perm.push_back(static_cast<int64_t>(i));
            TensorT<R> t = transpose(ins[0], perm);
            return {t.reshaped(b.outs[0].resolve(binding))};
        }
        case BoxKind::Contract: {
            int64_t lpi = b.attr_i("lpos"), rpi = b.attr_i("rpos");
            if (lpi < 0 || rpi < 0) {
                // tensor product
                std::vector<int64_t> sh = ins[0].shape;
                sh.insert(sh.end(), ins[1].shape.begin(), ins[1].shape.end());
                TensorT<R> out(sh);
                int64_t nb = ins[1].size();
                for (int64_t i = 0; i < ins[0].size(); ++i)
                    for (int64_t j = 0; j < nb; ++j)
                        out.data[static_cast<size_t>(i * nb + j)] =
                            ins[0].data[static_cast<size_t>(i)] * ins[1].data[static_cast<size_t>(j)];
                if (prof) prof->add("contract", out.size());
                return {out};
            }
            size_t lp = static_cast<size_t>(lpi);
            size_t rp = static_cast<size_t>(rpi);
            TensorT<R> out = contract_axis(ins[0], lp, ins[1], rp);
            if (prof) {
                int64_t k = ins[0].shape[lp];
                prof->add("contract", (ins[0].size() / k) * k * (ins[1].size() / k));
            }
            return {out};
        }
        case BoxKind::Simd: {
            const Diagram& body = *b.body;
            int64_t lanes = resolve_or_throw(binding, b.attr_dim("index"));
            bool res = b.simd_residual();
            Tensors<R> outs;
            for (size_t p = 0; p < b.outs.size(); ++p) outs.emplace_back(b.outs[p].resolve(binding));
            TensorT<R> residual;
            if (res) residual = ins[0];
            for (int64_t lane = 0; lane < lanes; ++lane) {
                Tensors<R> lane_ins;
                for (size_t p = 0; p < ins.size(); ++p) {
                    if (res && p == 0)
                        lane_ins.push_back(residual);
                    else
                        lane_ins.push_back(ins[p].slice0(lane));
                }
                Tensors<R> lane_outs = eval_diagram(body, binding, params, lane_ins, prof);
                for (size_t p = 0; p < lane_outs.size(); ++p) {
                    if (res && p == 0)
                        residual = lane_outs[p];
                    else
                        outs[p].set_slice0(lane, lane_outs[p]);
                }
            }
            if (res) outs[0] = residual;
            return outs;
        }
        case BoxKind::Primitive: return eval_primitive(b, binding, ins, prof);
        case BoxKind::Learnable: return eval_learnable(b, binding, params, ins, prof);
    }
    throw std::logic_error("eval: unreachable box kind");
}

template <typename R>
Tensors<R> eval_diagram(const Diagram& d, const Binding& binding, const ParamStoreT<R>& params,
                        const Tensors<R>& inputs, Profile* prof) {
    if (inputs.size() != d.ins.size()) throw ShapeFault("evaluation input arity mismatch");
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].shape != d.ins[i].resolve(binding))
            throw ShapeFault("input " + std::to_string(i) + " does not match bound shape " +
                             d.ins[i].str());
        if (prof) prof->note(inputs[i].size());
    }
    std::map<std::pair<int32_t, uint32_t>, TensorT<R>> vals;
    for (const auto& w : d.wires)
        if (w.src.boundary()) vals[{kBoundary, w.src.port}] = inputs[w.src.port];

    for (BoxId id : d.topo_order()) {
        const Box& b = d.box(id);
        Tensors<R> ins;
        for (uint32_t p = 0; p < b.ins.size(); ++p) {
            const Wire* w = d.wire_to(port_of(id, p));
            if (!w) throw ShapeFault("box input not wired");
            ins.push_back(vals.at({w->src.box, w->src.port}));
        }
        Tensors<R> outs = eval_box(b, binding, params, ins, prof);
        for (uint32_t p = 0; p < outs.size(); ++p) {
            if (prof) prof->note(outs[p].size());
            vals[{static_cast<int32_t>(id), p}] = std::move(outs[p]);
        }
    }

    Tensors<R> result(d.outs.size());
    for (const auto& w : d.wires)
        if (w.dst.boundary()) result[w.dst.port] = vals.at({w.src.box, w.src.port});
    return result;
}

}  // namespace interp

// Public entry points (64-bit).
inline std::vector<TensorValue> eval(const Diagram& d, const Binding& binding,
                                     const ParamStore& params, const std::vector<TensorValue>& inputs,
                                     Profile* prof = nullptr) {
    return interp::eval_diagram<double>(d, binding, params, inputs, prof);
}

inline Profile profile(const Diagram& d, const Binding& binding, const ParamStore& params,
                       const std::vector<TensorValue>& inputs) {
    Profile p;
    interp::eval_diagram<double>(d, binding, params, inputs, &p);
    return p;
}

// Least-squares slope of log flops vs log s, after subtracting the
// s-independent offset estimated from the two smallest s values.
inline double fit_scaling(const std::vector<int64_t>& s_list, const std::vector<double>& flops) {
    if (s_list.size() < 4) throw std::invalid_argument("fit_scaling needs at least 4 points");
    double s1 = static_cast<double>(s_list[0]), s2 = static_cast<double>(s_list[1]);
    double offset = std::max(0.0, flops[0] - (flops[1] - flops[0]) * s1 / (s2 - s1));
    if (offset >= flops[0]) offset = 0.0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    double n = static_cast<double>(s_list.size());
    for (size_t i = 0; i < s_list.size(); ++i) {
        double x = std::log(static_cast<double>(s_list[i]));
        double y = std::log(flops[i] - offset);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace attncalc

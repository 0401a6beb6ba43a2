// SPDX-License-Identifier: Apache-2.0
//
// Registry of primitive (parameter-free) operations: arities and shape
// rules. Evaluation and gradients live with the interpreter; this header
// is what the type checker consults.
//
// Elementwise ops act on tensors of any rank. Ops with a distinguished
// axis (softmax, layer_norm) act along the last axis and map over the
// rest. Binary ops allow trailing-axes broadcast: the second operand's
// shape must equal a suffix of the first's.

#pragma once

#include <functional>
#include <map>
#include <string>

namespace attncalc {

struct Box;  // diagram.hpp

namespace ops {

inline bool suffix_of(const Shape& small, const Shape& big) {
    if (small.rank() > big.rank()) return false;
    size_t off = big.rank() - small.rank();
    for (size_t i = 0; i < small.rank(); ++i)
        if (!small.dims[i].same_symbol(big.dims[off + i])) return false;
    return true;
}
inline bool prefix_of(const Shape& small, const Shape& big) {
    if (small.rank() > big.rank()) return false;
    for (size_t i = 0; i < small.rank(); ++i)
        if (!small.dims[i].same_symbol(big.dims[i])) return false;
    return true;
}

}  // namespace ops

// Returns "" when the box type-checks, otherwise a description of the fault.
inline std::string check_primitive(const Box& b) {
    const auto& op = b.op;
    auto nin = b.ins.size();
    auto nout = b.outs.size();
    auto unary_same = [&]() -> std::string {
        if (nin != 1 || nout != 1) return op + " must be unary";
        if (!(b.ins[0] == b.outs[0])) return op + " must preserve its shape";
        return "";
    };

    if (op == "exp" || op == "phi" || op == "relu" || op == "recip" || op == "neg")
        return unary_same();
    if (op == "scale") {
        if (!b.has_attr("scale")) return "scale needs a `scale` dimension attribute";
        return unary_same();
    }
    if (op == "softmax" || op == "softmax_scaled") {
        if (op == "softmax_scaled" && !b.has_attr("scale"))
            return "softmax_scaled needs a `scale` dimension attribute";
        std::string e = unary_same();
        if (!e.empty()) return e;
        if (b.ins[0].rank() < 1) return op + " needs rank >= 1";
        if (b.has_attr("causal") && b.attr_i("causal") != 0 && b.ins[0].rank() < 2)
            return "causal " + op + " needs rank >= 2";
        return "";
    }
    if (op == "layer_norm") {
        if (nin != 3 || nout != 1) return "layer_norm takes (v, gamma, beta)";
        if (b.ins[1].rank() != 1 || b.ins[2].rank() != 1) return "layer_norm gamma/beta must be rank 1";
        if (b.ins[0].rank() < 1) return "layer_norm input must have a feature axis";
        if (!b.ins[0].dims.back().same_symbol(b.ins[1].dims[0]) ||
            !b.ins[0].dims.back().same_symbol(b.ins[2].dims[0]))
            return "layer_norm gamma/beta must match the feature axis";
        if (!(b.ins[0] == b.outs[0])) return "layer_norm must preserve shape";
        return "";
    }
    if (op == "pos_enc") {
        if (nin != 0 || nout != 1 || b.outs[0].rank() != 2) return "pos_enc emits one rank-2 tensor";
        return "";
    }
    if (op == "ones") {
        if (nin != 0 || nout != 1 || b.outs[0].rank() != 1) return "ones emits one rank-1 tensor";
        return "";
    }
    if (op == "zeros") {
        if (nin != 0 || nout != 1) return "zeros emits one tensor";
        return "";
    }
    if (op == "const_scalar") {
        if (nin != 0 || nout != 1 || !b.outs[0].scalar()) return "const_scalar emits one scalar";
        if (!b.has_attr("value")) return "const_scalar needs a `value` attribute";
        return "";
    }
    if (op == "mask_causal" || op == "mask_ones") {
        if (nin != 0 || nout != 1 || b.outs[0].rank() != 2) return op + " emits one rank-2 tensor";
        return "";
    }
    if (op == "gaussian_window") {
        if (nin != 2 || nout != 1) return "gaussian_window takes (mean, std)";
        if (!b.ins[0].scalar() || !b.ins[1].scalar()) return "gaussian_window parameters are scalars";
        if (b.outs[0].rank() != 1) return "gaussian_window emits one rank-1 tensor";
        return "";
    }
    if (op == "add" || op == "mul" || op == "div") {
        if (nin != 2 || nout != 1) return op + " is binary";
        if (!(b.outs[0] == b.ins[0])) return op + " output must match first operand";
        if (!ops::suffix_of(b.ins[1], b.ins[0]))
            return op + ": second operand must equal a trailing suffix of the first";
        return "";
    }
    if (op == "div_lead" || op == "mul_lead") {
        if (nin != 2 || nout != 1) return op + " is binary";
        if (!(b.outs[0] == b.ins[0])) return op + " output must match first operand";
        if (!ops::prefix_of(b.ins[1], b.ins[0]))
            return op + ": second operand must equal a leading prefix of the first";
        return "";
    }
    if (op == "concat") {
        if (nin < 2 || nout != 1) return "concat takes at least two operands";
        const Shape& o = b.outs[0];
        if (o.rank() < 1) return "concat output must have rank >= 1";
        for (const auto& a : b.ins) {
            if (a.rank() != o.rank()) return "concat operands and output must share rank";
            for (size_t i = 0; i + 1 < a.rank(); ++i)
                if (!a.dims[i].same_symbol(o.dims[i])) return "concat leading axes must agree";
        }
        // width sum: all literal, or all multiples of one symbol
        const DimSym& dout = o.dims.back();
        bool all_lit = true;
        for (const auto& a : b.ins) all_lit &= a.dims.back().kind == DimKind::Lit;
        if (all_lit) {
            int64_t sum = 0;
            for (const auto& a : b.ins) sum += a.dims.back().lit;
            if (dout.kind != DimKind::Lit || dout.lit != sum)
                return "concat output width must be the sum of operand widths";
        } else {
            const DimSym& d0 = b.ins[0].dims.back();
            int64_t mult = 0;
            for (const auto& a : b.ins) {
                const DimSym& da = a.dims.back();
                if (da.kind == DimKind::Lit || da.kind != d0.kind || da.name != d0.name)
                    return "concat cannot add unrelated symbolic widths";
                mult += da.mult;
            }
            if (dout.kind != d0.kind || dout.name != d0.name || dout.mult != mult)
                return "concat output width must be the sum of operand widths";
        }
        return "";
    }
    if (op == "broadcast") {
        if (nin != 1 || nout != 1) return "broadcast is unary";
        if (!b.has_attr("index")) return "broadcast needs an `index` dimension attribute";
        if (!(b.outs[0] == b.ins[0].prepend(b.attr_dim("index"))))
            return "broadcast output must prepend the index axis";
        return "";
    }
    if (op == "pack2") {
        if (nin != 2 || nout != 1) return "pack2 is binary";
        if (!(b.ins[0] == b.ins[1])) return "pack2 operands must agree";
        if (!(b.outs[0] == b.ins[0].prepend(DimSym::of(2)))) return "pack2 output must be [2]-stacked";
        return "";
    }
    if (op == "unpack2") {
        if (nin != 1 || nout != 2) return "unpack2 is unary with two outputs";
        if (!(b.ins[0] == b.outs[0].prepend(DimSym::of(2))) || !(b.outs[0] == b.outs[1]))
            return "unpack2 input must be the [2]-stack of its outputs";
        return "";
    }
    if (op == "prefix_outer") {
        if (nin != 2 || nout != 1) return "prefix_outer is binary";
        if (b.ins[0].rank() != 2 || b.ins[1].rank() != 2) return "prefix_outer operands are rank 2";
        if (!b.ins[0].dims[0].same_symbol(b.ins[1].dims[0]))
            return "prefix_outer operands must share their position axis";
        Shape want{b.ins[0].dims[0], b.ins[0].dims[1], b.ins[1].dims[1]};
        if (!(b.outs[0] == want)) return "prefix_outer output must be " + want.str();
        return "";
    }
    if (op == "prefix_sum0") {
        if (nin != 1 || nout != 1 || !(b.ins[0] == b.outs[0]) || b.ins[0].rank() < 1)
            return "prefix_sum0 preserves a shape of rank >= 1";
        return "";
    }
    if (op == "shift_inject") {
        if (nin != 2 || nout != 2) return "shift_inject takes (residual, lanes)";
        if (b.ins[1].rank() < 1 || !(b.ins[1].drop(0) == b.ins[0]))
            return "shift_inject lanes must stack the residual shape";
        if (!(b.outs[0] == b.ins[0]) || !(b.outs[1] == b.ins[1]))
            return "shift_inject preserves (residual, lanes) shapes";
        return "";
    }
    return "unknown primitive op: " + op;
}

// ---- primitive box builders -------------------------------------------------

inline Box prim(std::string op, std::vector<Shape> ins, std::vector<Shape> outs,
                std::map<std::string, Attr> attrs = {}) {
    Box b;
    b.kind = BoxKind::Primitive;
    b.op = std::move(op);
    b.ins = std::move(ins);
    b.outs = std::move(outs);
    b.attrs = std::move(attrs);
    std::string err = check_primitive(b);
    if (err.empty()) return b;
    throw std::invalid_argument("bad primitive: " + err);
}

inline Box elementwise(const std::string& op, const Shape& s) { return prim(op, {s}, {s}); }
inline Box softmax_box(const Shape& s) { return prim("softmax", {s}, {s}); }
inline Box scaled_softmax_box(const Shape& s, const DimSym& dk, bool causal = false) {
    std::map<std::string, Attr> a{{"scale", dk}};
    if (causal) a["causal"] = int64_t{1};
    return prim("softmax_scaled", {s}, {s}, a);
}
inline Box scale_box(const Shape& s, const DimSym& dk) { return prim("scale", {s}, {s}, {{"scale", dk}}); }
inline Box layer_norm_box(const Shape& v, double eps = 1e-5) {
    Shape feat{v.dims.back()};
    return prim("layer_norm", {v, feat, feat}, {v}, {{"eps", eps}});
}
inline Box ones_box(const DimSym& n) { return prim("ones", {}, {Shape{n}}); }
inline Box zeros_box(const Shape& s) { return prim("zeros", {}, {s}); }
inline Box pos_enc_box(const DimSym& s, const DimSym& d) { return prim("pos_enc", {}, {Shape{s, d}}); }
inline Box concat_box_n(const std::vector<Shape>& parts) {
    Shape out = parts.at(0);
    bool all_lit = true;
    for (const auto& p : parts) all_lit &= p.dims.back().kind == DimKind::Lit;
    if (all_lit) {
        int64_t sum = 0;
        for (const auto& p : parts) sum += p.dims.back().lit;
        out.dims.back() = DimSym::of(sum);
    } else {
        int64_t mult = 0;
        for (const auto& p : parts) mult += p.dims.back().mult;
        out.dims.back() = parts[0].dims.back();
        out.dims.back().mult = mult;
    }
    return prim("concat", parts, {out});
}
inline Box concat_box(const Shape& a, const Shape& b) { return concat_box_n({a, b}); }
inline Box broadcast_box(const Shape& s, const DimSym& idx) {
    return prim("broadcast", {s}, {s.prepend(idx)}, {{"index", idx}});
}
inline Box pack2_box(const Shape& s) { return prim("pack2", {s, s}, {s.prepend(DimSym::of(2))}); }
inline Box unpack2_box(const Shape& s) { return prim("unpack2", {s.prepend(DimSym::of(2))}, {s, s}); }
inline Box add_box(const Shape& a, const Shape& b) { return prim("add", {a, b}, {a}); }
inline Box mul_box(const Shape& a, const Shape& b) { return prim("mul", {a, b}, {a}); }
inline Box div_box(const Shape& a, const Shape& b) { return prim("div", {a, b}, {a}); }
inline Box div_lead_box(const Shape& a, const Shape& b) { return prim("div_lead", {a, b}, {a}); }
inline Box mul_lead_box(const Shape& a, const Shape& b) { return prim("mul_lead", {a, b}, {a}); }

inline Box learnable_box(std::string ua_id, std::vector<Shape> ins, std::vector<Shape> outs) {
    Box b;
    b.kind = BoxKind::Learnable;
    b.op = std::move(ua_id);
    b.ins = std::move(ins);
    b.outs = std::move(outs);
    return b;
}
// A raw parameter tensor (0-input learnable).
inline Box param_box(std::string ua_id, Shape out) { return learnable_box(std::move(ua_id), {}, {out}); }

}  // namespace attncalc

// SPDX-License-Identifier: Apache-2.0
//
// The five attention generators with fully elaborated internals, over the
// wire sorts
//   SeqD     [s, d]                the token stream
//   AttMat   [s^(q), s^(k)]        a row-normalized attention pattern
//   LinState [2, s, d]             the paired feature-mapped query/key
//                                  streams, carried as one stacked wire
//
// Every learnable box id is prefixed per-instance so distinct generator
// instances own distinct parameters.

#pragma once

#include "attncalc/diagram.hpp"
#include "attncalc/ops.hpp"

namespace attncalc::zoo {

enum class Sort { SeqD, AttMat, LinState };

inline const char* sort_name(Sort s) {
    switch (s) {
        case Sort::SeqD: return "SeqD";
        case Sort::AttMat: return "AttMat";
        case Sort::LinState: return "LinState";
    }
    return "?";
}

struct SortShapes {
    DimSym s = DimSym::seq("s");
    DimSym d = DimSym::fixed("d");

    Shape seqd() const { return Shape{s, d}; }
    Shape attmat() const { return Shape{s.with_role("q"), s.with_role("k")}; }
    Shape linstate() const { return Shape{DimSym::of(2), s, d}; }
    Shape of(Sort which) const {
        switch (which) {
            case Sort::SeqD: return seqd();
            case Sort::AttMat: return attmat();
            case Sort::LinState: return linstate();
        }
        return seqd();
    }
};

enum class GenKind { ConcatFF, AttPrep, AttApply, LinAttPrep, LinAttApply };

struct Generator {
    GenKind kind;
    std::string name;
    std::vector<Sort> ins;
    Sort out;
};

inline const std::vector<Generator>& generators() {
    static const std::vector<Generator> gs = {
        {GenKind::ConcatFF, "ConcatFF", {Sort::SeqD, Sort::SeqD}, Sort::SeqD},
        {GenKind::AttPrep, "AttPrep", {Sort::SeqD, Sort::SeqD}, Sort::AttMat},
        {GenKind::AttApply, "AttApply", {Sort::AttMat, Sort::SeqD}, Sort::SeqD},
        {GenKind::LinAttPrep, "LinAttPrep", {Sort::SeqD, Sort::SeqD}, Sort::LinState},
        {GenKind::LinAttApply, "LinAttApply", {Sort::LinState, Sort::SeqD}, Sort::SeqD},
    };
    return gs;
}

// Append one generator's internals onto a builder; `vals` supplies its
// input wires and the instance owns learnables prefixed by `pfx`.
inline Val emit_generator(Builder& bl, GenKind kind, const std::string& pfx,
                          const std::vector<Val>& vals, const SortShapes& ss) {
    Shape seqd = ss.seqd();
    switch (kind) {
        case GenKind::ConcatFF: {
            Val cc = bl.add1(concat_box(seqd, seqd), {vals[0], vals[1]});
            return bl.add1(learnable_box(pfx + "/ff", {cc.shape}, {seqd}), {cc});
        }
        case GenKind::AttPrep: {
            Shape qshape{ss.s.with_role("q"), ss.d};
            Shape kshape{ss.s.with_role("k"), ss.d};
            Val q = bl.add1(learnable_box(pfx + "/q", {seqd}, {qshape}), {vals[0]});
            Val k = bl.add1(learnable_box(pfx + "/k", {seqd}, {kshape}), {vals[1]});
            Val a0 = bl.add1(contract_box(qshape, kshape, 1, 1), {q, k});
            return bl.add1(scaled_softmax_box(a0.shape, ss.d), {a0});
        }
        case GenKind::AttApply: {
            Shape kshape{ss.s.with_role("k"), ss.d};
            Val v = bl.add1(learnable_box(pfx + "/v", {seqd}, {kshape}), {vals[1]});
            Val out = bl.add1(contract_box(vals[0].shape, kshape, 1, 0), {vals[0], v});
            return out;  // [s^(q), d]
        }
        case GenKind::LinAttPrep: {
            Val q = bl.add1(learnable_box(pfx + "/q", {seqd}, {seqd}), {vals[0]});
            Val k = bl.add1(learnable_box(pfx + "/k", {seqd}, {seqd}), {vals[1]});
            Val pq = bl.add1(elementwise("phi", seqd), {q});
            Val pk = bl.add1(elementwise("phi", seqd), {k});
            return bl.add1(pack2_box(seqd), {pq, pk});
        }
        case GenKind::LinAttApply: {
            auto parts = bl.add(unpack2_box(seqd), {vals[0]});
            Val pq = parts[0], pk = parts[1];
            Val v = bl.add1(learnable_box(pfx + "/v", {seqd}, {seqd}), {vals[1]});
            auto [pk1, pk2] = bl.copy(pk);
            auto [pq1, pq2] = bl.copy(pq);
            Val S = bl.add1(contract_box(seqd, seqd, 0, 0), {pk1, v});        // [d', d]
            Val ones = bl.add1(ones_box(ss.s.with_role("k")), {});            // [s]
            Val z = bl.add1(contract_box(seqd, ones.shape, 0, 0), {pk2, ones});  // [d']
            Val num = bl.add1(contract_box(seqd, S.shape, 1, 0), {pq1, S});   // [s, d]
            Val den = bl.add1(contract_box(seqd, z.shape, 1, 0), {pq2, z});   // [s]
            return bl.add1(div_lead_box(num.shape, den.shape), {num, den});
        }
    }
    throw std::logic_error("unknown generator kind");
}

// Single-generator diagram (library clients and tests).
inline Diagram generator_diagram(GenKind kind, const std::string& pfx = "g",
                                 const SortShapes& ss = {}) {
    const Generator* g = nullptr;
    for (const auto& cand : generators())
        if (cand.kind == kind) g = &cand;
    Builder bl;
    std::vector<Val> ins;
    for (Sort s : g->ins) ins.push_back(bl.input(ss.of(s)));
    bl.output(emit_generator(bl, kind, pfx, ins, ss));
    return bl.finish();
}

// Reference two-generator models named in the catalog.
inline Diagram reference_dot_attention(const SortShapes& ss = {}) {
    Builder bl;
    Val x = bl.input(ss.seqd());
    auto xs = bl.copies(x, 3);
    Val a = emit_generator(bl, GenKind::AttPrep, "g0", {xs[0], xs[1]}, ss);
    bl.output(emit_generator(bl, GenKind::AttApply, "g1", {a, xs[2]}, ss));
    return bl.finish();
}

inline Diagram reference_linear_attention(const SortShapes& ss = {}) {
    Builder bl;
    Val x = bl.input(ss.seqd());
    auto xs = bl.copies(x, 3);
    Val st = emit_generator(bl, GenKind::LinAttPrep, "g0", {xs[0], xs[1]}, ss);
    bl.output(emit_generator(bl, GenKind::LinAttApply, "g1", {st, xs[2]}, ss));
    return bl.finish();
}

}  // namespace attncalc::zoo

// SPDX-License-Identifier: Apache-2.0
//
// The built-in rewrite rule library.
//
// Semantic rules are function-preserving and carry randomized instances
// for the interpreter-equality suite. Expressivity rules are directed
// specializations of learnable boxes (with parameter-transport witnesses
// where the catalog needs them). Structural edits are replay-only.

#pragma once

#include "attncalc/engine.hpp"
#include "attncalc/ops.hpp"

namespace attncalc {
namespace rules {

// ---- graph surgery helpers ---------------------------------------------------

inline End source_of(const Diagram& d, End dst) {
    const Wire* w = d.wire_to(dst);
    if (!w) throw StaleMatch("expected wire into port");
    return w->src;
}
inline End consumer_of(const Diagram& d, End src) {
    const Wire* w = d.wire_from(src);
    if (!w) throw StaleMatch("expected wire out of port");
    return w->dst;
}
inline Shape shape_from(const Diagram& d, End src) {
    const Wire* w = d.wire_from(src);
    if (!w) throw StaleMatch("expected wire out of port");
    return w->shape;
}

// Resolve a producer end through copy chains to the underlying value.
inline End resolve_value(const Diagram& d, End src) {
    while (!src.boundary()) {
        const Box& b = d.box(static_cast<BoxId>(src.box));
        if (b.kind != BoxKind::Copy) break;
        src = source_of(d, port_of(static_cast<BoxId>(src.box), 0));
    }
    return src;
}

inline void erase_box(Diagram& d, BoxId id) { d.boxes.erase(id); }

// Comonoid counit housekeeping: a copy with one leg deleted is a plain
// wire. Applied after rewrites that discard one branch of a copy, so that
// later matches see the direct connection.
inline void cleanup_counit(Diagram& d) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (const auto& [cid, c] : d.boxes) {
            if (c.kind != BoxKind::Copy) continue;
            for (uint32_t leg = 0; leg < 2 && !changed; ++leg) {
                const Wire* w = d.wire_from(port_of(cid, leg));
                if (!w || w->dst.boundary()) continue;
                BoxId dlid = static_cast<BoxId>(w->dst.box);
                const Box& dl = d.box(dlid);
                if (dl.kind != BoxKind::Delete) continue;
                End src = source_of(d, port_of(cid, 0));
                End keep = consumer_of(d, port_of(cid, 1 - leg));
                Shape sh = c.ins[0];
                d.drop_wire_to(port_of(cid, 0));
                d.drop_wire_from(port_of(cid, 0));
                d.drop_wire_from(port_of(cid, 1));
                d.drop_wire_to(port_of(dlid, 0));
                erase_box(d, cid);
                erase_box(d, dlid);
                d.connect(src, keep, sh);
                changed = true;
            }
            if (changed) break;
        }
    }
}

inline bool reaches(const Diagram& d, BoxId from, BoxId to) {
    if (from == to) return true;
    std::set<BoxId> seen{from};
    std::vector<BoxId> stack{from};
    while (!stack.empty()) {
        BoxId cur = stack.back();
        stack.pop_back();
        for (const auto& w : d.wires) {
            if (w.src.boundary() || w.dst.boundary()) continue;
            if (static_cast<BoxId>(w.src.box) != cur) continue;
            BoxId nxt = static_cast<BoxId>(w.dst.box);
            if (nxt == to) return true;
            if (seen.insert(nxt).second) stack.push_back(nxt);
        }
    }
    return false;
}

// Splice a sub-diagram in place of box `victim`: the plug's boundary must
// equal the victim's in/out shapes. Returns the modified diagram.
inline Diagram splice_replace(const Diagram& d, BoxId victim, const Diagram& plug) {
    const Box& v = d.box(victim);
    if (plug.ins.size() != v.ins.size() || plug.outs.size() != v.outs.size())
        throw StaleMatch("plug arity does not match the replaced box");
    Diagram out = d;
    std::vector<End> in_srcs(v.ins.size());
    std::vector<End> out_dsts(v.outs.size());
    std::vector<Shape> out_shapes(v.outs.size());
    for (uint32_t p = 0; p < v.ins.size(); ++p) {
        in_srcs[p] = source_of(out, port_of(victim, p));
        out.drop_wire_to(port_of(victim, p));
    }
    for (uint32_t p = 0; p < v.outs.size(); ++p) {
        const Wire* w = out.wire_from(port_of(victim, p));
        if (!w) throw StaleMatch("replaced box output is unconnected");
        out_dsts[p] = w->dst;
        out_shapes[p] = w->shape;
        out.drop_wire_from(port_of(victim, p));
    }
    erase_box(out, victim);
    std::map<BoxId, BoxId> idmap;
    for (const auto& [bid, bb] : plug.boxes) idmap[bid] = out.add_box(bb);
    auto remap_src = [&](End e) { return e.boundary() ? in_srcs[e.port] : End{static_cast<int32_t>(idmap.at(static_cast<BoxId>(e.box))), e.port}; };
    for (const auto& w : plug.wires) {
        End s = remap_src(w.src);
        if (w.dst.boundary()) {
            out.connect(s, out_dsts[w.dst.port], out_shapes[w.dst.port]);
        } else {
            out.connect(s, End{static_cast<int32_t>(idmap.at(static_cast<BoxId>(w.dst.box))), w.dst.port},
                        w.shape);
        }
    }
    return out;
}

// ---- copy naturality -----------------------------------------------------------
// f ; copy  <->  copy-all-inputs ; (f x f)   (same box, shared identity)

class CopyNaturality final : public RewriteRule {
public:
    CopyNaturality() : RewriteRule("copy-naturality", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "a single-output box followed by copy commutes with copying its inputs and "
               "duplicating the box";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        if (dir == Direction::Fwd) {
            for (const auto& [id, b] : d.boxes) {
                if (b.kind == BoxKind::Copy || b.kind == BoxKind::Delete) continue;
                if (b.outs.size() != 1) continue;
                const Wire* w = d.wire_from(port_of(id, 0));
                if (!w || w->dst.boundary()) continue;
                const Box& c = d.box(static_cast<BoxId>(w->dst.box));
                if (c.kind != BoxKind::Copy) continue;
                Match m;
                m.locator = "b" + std::to_string(id);
                m.boxes["f"] = id;
                m.boxes["c"] = static_cast<BoxId>(w->dst.box);
                out.push_back(std::move(m));
            }
        } else {
            for (const auto& [id1, b1] : d.boxes) {
                if (b1.kind == BoxKind::Copy || b1.kind == BoxKind::Delete) continue;
                if (b1.outs.size() != 1) continue;
                for (const auto& [id2, b2] : d.boxes) {
                    if (id2 <= id1) continue;
                    if (!same_function(b1, b2)) continue;
                    // every input pair fed by the two legs of one copy box
                    bool ok = !b1.ins.empty() || true;
                    std::vector<BoxId> copies;
                    ok = true;
                    for (uint32_t p = 0; p < b1.ins.size() && ok; ++p) {
                        End s1 = source_of(d, port_of(id1, p));
                        End s2 = source_of(d, port_of(id2, p));
                        if (s1.boundary() || s2.boundary() || s1.box != s2.box || s1.port == s2.port) {
                            ok = false;
                            break;
                        }
                        const Box& cb = d.box(static_cast<BoxId>(s1.box));
                        if (cb.kind != BoxKind::Copy) ok = false;
                        copies.push_back(static_cast<BoxId>(s1.box));
                    }
                    if (!ok) continue;
                    Match m;
                    m.locator = "b" + std::to_string(id1) + "+b" + std::to_string(id2);
                    m.boxes["f"] = id1;
                    m.boxes["g"] = id2;
                    out.push_back(std::move(m));
                }
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        Diagram out = d;
        if (dir == Direction::Fwd) {
            BoxId fid = m.boxes.at("f");
            if (!out.has_box(fid)) throw StaleMatch("copy-naturality: box gone");
            const Box f = out.box(fid);
            BoxId cid = m.boxes.at("c");
            need_box(out, cid, BoxKind::Copy, "copy-naturality");
            End dst0 = consumer_of(out, port_of(cid, 0));
            End dst1 = consumer_of(out, port_of(cid, 1));
            Shape oshape = f.outs[0];
            BoxId f2 = out.add_box(f);
            for (uint32_t p = 0; p < f.ins.size(); ++p) {
                End src = source_of(out, port_of(fid, p));
                out.drop_wire_to(port_of(fid, p));
                BoxId cp = out.add_box(copy_box(f.ins[p]));
                out.connect(src, port_of(cp, 0), f.ins[p]);
                out.connect(port_of(cp, 0), port_of(fid, p), f.ins[p]);
                out.connect(port_of(cp, 1), port_of(f2, p), f.ins[p]);
            }
            out.drop_wire_from(port_of(fid, 0));
            out.drop_wire_from(port_of(cid, 0));
            out.drop_wire_from(port_of(cid, 1));
            out.drop_wire_to(port_of(cid, 0));
            erase_box(out, cid);
            out.connect(port_of(fid, 0), dst0, oshape);
            out.connect(port_of(f2, 0), dst1, oshape);
            return out;
        }
        // bwd: merge the two boxes
        BoxId id1 = m.boxes.at("f"), id2 = m.boxes.at("g");
        if (!out.has_box(id1) || !out.has_box(id2)) throw StaleMatch("copy-naturality: box gone");
        const Box f = out.box(id1);
        for (uint32_t p = 0; p < f.ins.size(); ++p) {
            End s1 = source_of(out, port_of(id1, p));
            BoxId cp = static_cast<BoxId>(s1.box);
            End base = source_of(out, port_of(cp, 0));
            out.drop_wire_to(port_of(id1, p));
            out.drop_wire_to(port_of(id2, p));
            out.drop_wire_from(port_of(cp, 0));
            out.drop_wire_from(port_of(cp, 1));
            out.drop_wire_to(port_of(cp, 0));
            erase_box(out, cp);
            out.connect(base, port_of(id1, p), f.ins[p]);
        }
        End d1 = consumer_of(out, port_of(id1, 0));
        End d2 = consumer_of(out, port_of(id2, 0));
        out.drop_wire_from(port_of(id1, 0));
        out.drop_wire_from(port_of(id2, 0));
        erase_box(out, id2);
        BoxId cp = out.add_box(copy_box(f.outs[0]));
        out.connect(port_of(id1, 0), port_of(cp, 0), f.outs[0]);
        out.connect(port_of(cp, 0), d1, f.outs[0]);
        out.connect(port_of(cp, 1), d2, f.outs[0]);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        (void)seed;
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape SD{S, D};
        Builder b;
        Val x = b.input(SD);
        Val y = b.add1(learnable_box("f", {SD}, {SD}), {x});
        auto [c1, c2] = b.copy(y);
        b.output(b.add1(elementwise("exp", SD), {c1}));
        b.output(b.add1(elementwise("phi", SD), {c2}));
        RuleInstance inst;
        inst.diagram = b.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }

    static bool same_function(const Box& a, const Box& b) {
        if (a.kind != b.kind || a.op != b.op) return false;
        if (a.ins.size() != b.ins.size() || a.outs.size() != b.outs.size()) return false;
        for (size_t i = 0; i < a.ins.size(); ++i)
            if (!(a.ins[i] == b.ins[i])) return false;
        for (size_t i = 0; i < a.outs.size(); ++i)
            if (!(a.outs[i] == b.outs[i])) return false;
        return canon::attrs_equal(a.attrs, b.attrs) &&
               (a.kind != BoxKind::Simd ||
                (a.body && b.body && canonicalize(*a.body) == canonicalize(*b.body)));
    }
};

// ---- braid naturality -----------------------------------------------------------
// Wire crossings are not boxes in this representation, so sliding a box
// past a braid does not change the graph; the rule certifies this by
// rebuilding an isomorphic copy.

class BraidNaturality final : public RewriteRule {
public:
    BraidNaturality() : RewriteRule("braid-naturality", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "crossings are wire geometry, not boxes; sliding past a braid relabels only";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        if (d.boxes.empty()) return {};
        Match m;
        m.locator = "all";
        return {m};
    }
    Diagram apply_flat(const Diagram& d, const Match&, Direction) const override {
        return compose_seq(identity(d.ins), d);  // fresh box identifiers, same graph
    }
    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape SD{S, D};
        Builder b;
        Val x = b.input(SD);
        Val y = b.input(SD);
        b.output(b.add1(elementwise("phi", SD), {y}));
        b.output(b.add1(elementwise("exp", SD), {x}));
        RuleInstance inst;
        inst.diagram = b.finish();
        inst.match = find(inst.diagram, Direction::Fwd).front();
        return inst;
    }
};

// ---- contraction associativity ---------------------------------------------------
// (X ._b Y) ._c Z  <->  X ._b (Y ._c Z)  when the c axis lives in the Y
// part. Degenerate contractions along no axes (tensor products, scalar
// scaling) associate the same way.

class ContractAssoc final : public RewriteRule {
public:
    ContractAssoc() : RewriteRule("contract-assoc", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override { return "associativity of chained tensor contractions"; }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        for (const auto& [id2, c2] : d.boxes) {
            if (c2.kind != BoxKind::Contract) continue;
            uint32_t chain_port = dir == Direction::Fwd ? 0 : 1;
            const Wire* w = d.wire_to(port_of(id2, chain_port));
            if (!w || w->src.boundary()) continue;
            const Box& c1 = d.box(static_cast<BoxId>(w->src.box));
            if (c1.kind != BoxKind::Contract || w->src.port != 0) continue;
            if (dir == Direction::Fwd) {
                // outer's dropped axis (if any) must come from the Y part
                int64_t dI = c2.attr_i("lpos");
                int64_t dx = c1.attr_i("lpos");
                size_t rx_eff = c1.ins[0].rank() - (dx >= 0 ? 1 : 0);
                if (dI >= 0 && static_cast<size_t>(dI) < rx_eff) continue;
            } else {
                int64_t dJ = c2.attr_i("rpos");
                int64_t dy = c1.attr_i("lpos");
                size_t ry_eff = c1.ins[0].rank() - (dy >= 0 ? 1 : 0);
                if (dJ >= 0 && static_cast<size_t>(dJ) >= ry_eff) continue;
            }
            Match m;
            m.locator = "b" + std::to_string(id2);
            m.boxes["outer"] = id2;
            m.boxes["inner"] = static_cast<BoxId>(w->src.box);
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        BoxId oid = m.boxes.at("outer"), iid = m.boxes.at("inner");
        const Box outer = need_box(d, oid, BoxKind::Contract, "contract-assoc");
        const Box inner = need_box(d, iid, BoxKind::Contract, "contract-assoc");
        Diagram out = d;
        auto mk = [](const Shape& a, const Shape& b, int64_t lp, int64_t rp) {
            if (lp < 0) return outer_box(a, b);
            return contract_box(a, b, static_cast<size_t>(lp), static_cast<size_t>(rp));
        };
        if (dir == Direction::Fwd) {
            // inner: X [drop dx] . Y [drop dy]; outer: I [drop dI] . Z [drop dz]
            int64_t dx = inner.attr_i("lpos"), dy = inner.attr_i("rpos");
            int64_t dI = outer.attr_i("lpos"), dz = outer.attr_i("rpos");
            Shape X = inner.ins[0], Y = inner.ins[1], Z = outer.ins[1];
            int64_t rx_eff = static_cast<int64_t>(X.rank()) - (dx >= 0 ? 1 : 0);
            int64_t y_c = -1;
            if (dI >= 0) {
                int64_t py = dI - rx_eff;  // position in Y after dropping dy
                y_c = (dy >= 0 && py >= dy) ? py + 1 : py;
            }
            End xsrc = source_of(out, port_of(iid, 0));
            End ysrc = source_of(out, port_of(iid, 1));
            End zsrc = source_of(out, port_of(oid, 1));
            End dst = consumer_of(out, port_of(oid, 0));
            Shape res = shape_from(out, port_of(oid, 0));
            out.drop_wire_to(port_of(iid, 0));
            out.drop_wire_to(port_of(iid, 1));
            out.drop_wire_to(port_of(oid, 1));
            out.drop_wire_from(port_of(iid, 0));
            out.drop_wire_from(port_of(oid, 0));
            erase_box(out, iid);
            erase_box(out, oid);
            Box nin = mk(Y, Z, y_c, y_c < 0 ? -1 : dz);
            // position of the b axis inside Y (if inner really contracted)
            int64_t pb = -1;
            if (dx >= 0) pb = dy - ((y_c >= 0 && y_c < dy) ? 1 : 0);
            BoxId nid = out.add_box(nin);
            Box nout = mk(X, nin.outs[0], dx, pb);
            BoxId mid = out.add_box(nout);
            out.connect(ysrc, port_of(nid, 0), Y);
            out.connect(zsrc, port_of(nid, 1), Z);
            out.connect(xsrc, port_of(mid, 0), X);
            out.connect(port_of(nid, 0), port_of(mid, 1), nin.outs[0]);
            out.connect(port_of(mid, 0), dst, res);
            return out;
        }
        // bwd: X [dx] . (Y [dy_c] . Z [dz]) -> (X . Y) . Z, outer drops into Y
        int64_t y_c = inner.attr_i("lpos"), z_c = inner.attr_i("rpos");
        int64_t x_b = outer.attr_i("lpos"), j_b = outer.attr_i("rpos");
        Shape Y = inner.ins[0], Z = inner.ins[1], X = outer.ins[0];
        int64_t y_b = -1;
        if (j_b >= 0) y_b = (y_c >= 0 && j_b >= y_c) ? j_b + 1 : j_b;
        End ysrc = source_of(out, port_of(iid, 0));
        End zsrc = source_of(out, port_of(iid, 1));
        End xsrc = source_of(out, port_of(oid, 0));
        End dst = consumer_of(out, port_of(oid, 0));
        Shape res = shape_from(out, port_of(oid, 0));
        out.drop_wire_to(port_of(iid, 0));
        out.drop_wire_to(port_of(iid, 1));
        out.drop_wire_to(port_of(oid, 0));
        out.drop_wire_from(port_of(iid, 0));
        out.drop_wire_from(port_of(oid, 0));
        erase_box(out, iid);
        erase_box(out, oid);
        Box nin = mk(X, Y, x_b, y_b);
        BoxId nid = out.add_box(nin);
        int64_t rx_eff = static_cast<int64_t>(X.rank()) - (x_b >= 0 ? 1 : 0);
        int64_t pc = -1;
        if (y_c >= 0) pc = rx_eff + y_c - ((y_b >= 0 && y_b < y_c) ? 1 : 0);
        Box nout = mk(nin.outs[0], Z, pc, pc < 0 ? -1 : z_c);
        BoxId mid = out.add_box(nout);
        out.connect(xsrc, port_of(nid, 0), X);
        out.connect(ysrc, port_of(nid, 1), Y);
        out.connect(port_of(nid, 0), port_of(mid, 0), nin.outs[0]);
        out.connect(zsrc, port_of(mid, 1), Z);
        out.connect(port_of(mid, 0), dst, res);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        DimSym a = DimSym::fixed("a"), bb = DimSym::fixed("b"), c = DimSym::fixed("c"),
               e = DimSym::fixed("e");
        Builder bl;
        if (seed % 2 == 0) {
            Val X = bl.input(Shape{a, bb});
            Val Y = bl.input(Shape{bb, c});
            Val Z = bl.input(Shape{c, e});
            Val I = bl.add1(contract_box(Shape{a, bb}, Shape{bb, c}, 1, 0), {X, Y});
            bl.output(bl.add1(contract_box(I.shape, Shape{c, e}, 1, 0), {I, Z}));
        } else {
            // scalar scaling associates with a true contraction
            Val r = bl.input(Shape{});
            Val v = bl.input(Shape{c});
            Val M = bl.input(Shape{c, e});
            Val I = bl.add1(outer_box(Shape{}, Shape{c}), {r, v});
            bl.output(bl.add1(contract_box(Shape{c}, Shape{c, e}, 0, 0), {I, M}));
        }
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// ---- simd laws -------------------------------------------------------------------

namespace simdutil {

// Remove boundary input p / output q from a body, rewiring pass-through.
// Boundary port indices above the removed slots shift down by one.
inline Diagram drop_strand(const Diagram& body, uint32_t p, uint32_t q) {
    Diagram out;
    out.ins = body.ins;
    out.outs = body.outs;
    out.ins.erase(out.ins.begin() + p);
    out.outs.erase(out.outs.begin() + q);
    std::map<BoxId, BoxId> idmap;
    for (const auto& [id, b] : body.boxes) idmap[id] = out.add_box(b);
    for (const auto& w : body.wires) {
        if (w.src.boundary() && w.src.port == p && w.dst.boundary() && w.dst.port == q) continue;
        End s = w.src, t = w.dst;
        if (s.boundary() && s.port > p) s.port--;
        if (t.boundary() && t.port > q) t.port--;
        if (!s.boundary()) s.box = static_cast<int32_t>(idmap.at(static_cast<BoxId>(s.box)));
        if (!t.boundary()) t.box = static_cast<int32_t>(idmap.at(static_cast<BoxId>(t.box)));
        out.connect(s, t, w.shape);
    }
    return out;
}

// Rebuild a simd box around a replacement body, transplanting outer wires
// according to the given port maps (old port -> new port; -1 drops).
struct SimdRebuild {
    Diagram out;
    BoxId new_box = 0;
};

inline SimdRebuild rebuild_simd(const Diagram& d, BoxId sid, const Diagram& new_body,
                                const DimSym& idx, bool residual,
                                const std::vector<int>& in_map, const std::vector<int>& out_map) {
    const Box& s = d.box(sid);
    SimdRebuild r;
    r.out = d;
    Box nb = make_simd_box(std::make_shared<Diagram>(new_body), idx, residual);
    std::vector<End> in_srcs(s.ins.size());
    std::vector<End> out_dsts(s.outs.size());
    std::vector<Shape> out_shapes(s.outs.size());
    for (uint32_t p = 0; p < s.ins.size(); ++p) {
        in_srcs[p] = source_of(r.out, port_of(sid, p));
        r.out.drop_wire_to(port_of(sid, p));
    }
    for (uint32_t p = 0; p < s.outs.size(); ++p) {
        const Wire* w = r.out.wire_from(port_of(sid, p));
        out_dsts[p] = w->dst;
        out_shapes[p] = w->shape;
        r.out.drop_wire_from(port_of(sid, p));
    }
    erase_box(r.out, sid);
    std::vector<Shape> nins = nb.ins;
    r.new_box = r.out.add_box(std::move(nb));
    for (uint32_t p = 0; p < in_map.size(); ++p)
        if (in_map[p] >= 0)
            r.out.connect(in_srcs[p], port_of(r.new_box, static_cast<uint32_t>(in_map[p])),
                          nins[static_cast<size_t>(in_map[p])]);
    for (uint32_t p = 0; p < out_map.size(); ++p)
        if (out_map[p] >= 0)
            r.out.connect(port_of(r.new_box, static_cast<uint32_t>(out_map[p])), out_dsts[p],
                          out_shapes[p]);
    return r;
}

}  // namespace simdutil

// Simd of a sequential body splits into sequential simds (and merges back).
class SimdSplit final : public RewriteRule {
public:
    SimdSplit() : RewriteRule("simd-split", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "parallel iteration of a composite equals the composite of parallel iterations";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        if (dir == Direction::Fwd) {
            for (const auto& [id, s] : d.boxes) {
                if (s.kind != BoxKind::Simd || s.simd_residual()) continue;
                const Diagram& body = *s.body;
                if (body.boxes.size() < 2) continue;
                // peelable tail: every output of t goes straight to the boundary
                for (const auto& [tid, t] : body.boxes) {
                    if (t.outs.empty()) continue;
                    bool tail = true;
                    for (uint32_t p = 0; p < t.outs.size() && tail; ++p) {
                        const Wire* w = body.wire_from(port_of(tid, p));
                        if (!w || !w->dst.boundary()) tail = false;
                    }
                    if (!tail) continue;
                    Match m;
                    m.locator = "b" + std::to_string(id) + ":t" + std::to_string(tid);
                    m.boxes["s"] = id;
                    m.boxes["t"] = tid;
                    out.push_back(std::move(m));
                }
            }
        } else {
            for (const auto& [id2, s2] : d.boxes) {
                if (s2.kind != BoxKind::Simd || s2.simd_residual()) continue;
                // all of s2's inputs come from one simd s1 with the same index
                std::set<int32_t> srcs;
                bool ok = !s2.ins.empty();
                for (uint32_t p = 0; p < s2.ins.size() && ok; ++p) {
                    const Wire* w = d.wire_to(port_of(id2, p));
                    if (!w || w->src.boundary()) ok = false;
                    else srcs.insert(w->src.box);
                }
                if (!ok || srcs.size() != 1) continue;
                BoxId id1 = static_cast<BoxId>(*srcs.begin());
                const Box& s1 = d.box(id1);
                if (s1.kind != BoxKind::Simd || s1.simd_residual()) continue;
                if (!s1.attr_dim("index").same_symbol(s2.attr_dim("index"))) continue;
                // every s1 output must feed s2
                bool full = true;
                for (uint32_t p = 0; p < s1.outs.size(); ++p) {
                    End c = consumer_of(d, port_of(id1, p));
                    if (c.boundary() || static_cast<BoxId>(c.box) != id2) full = false;
                }
                if (!full) continue;
                Match m;
                m.locator = "b" + std::to_string(id1) + "+b" + std::to_string(id2);
                m.boxes["s1"] = id1;
                m.boxes["s2"] = id2;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        if (dir == Direction::Fwd) {
            BoxId sid = m.boxes.at("s");
            const Box s = need_box(d, sid, BoxKind::Simd, "simd-split");
            const Diagram& body = *s.body;
            BoxId tid = m.boxes.at("t");
            if (!body.boxes.count(tid)) throw StaleMatch("simd-split: tail box gone");
            const Box t = body.box(tid);
            DimSym idx = s.attr_dim("index");
            // which body outputs does t produce?
            std::vector<int> out_from_t(body.outs.size(), -1);  // -> t out port
            for (uint32_t p = 0; p < t.outs.size(); ++p) {
                const Wire* w = body.wire_from(port_of(tid, p));
                out_from_t[w->dst.port] = static_cast<int>(p);
            }
            // head: everything except t; outputs = t's input sources, then the
            // original non-t outputs (pass-through strands in the tail stage)
            Diagram head;
            head.ins = body.ins;
            std::map<BoxId, BoxId> idmap;
            for (const auto& [bid, bb] : body.boxes)
                if (bid != tid) idmap[bid] = head.add_box(bb);
            std::vector<End> tsrc(t.ins.size());
            for (uint32_t p = 0; p < t.ins.size(); ++p) tsrc[p] = source_of(body, port_of(tid, p));
            auto remap = [&](End e) {
                if (e.boundary()) return e;
                return End{static_cast<int32_t>(idmap.at(static_cast<BoxId>(e.box))), e.port};
            };
            std::vector<End> pass_src;
            std::vector<Shape> pass_shape;
            std::vector<uint32_t> pass_out;  // original out slot
            for (uint32_t q = 0; q < body.outs.size(); ++q) {
                if (out_from_t[q] >= 0) continue;
                const Wire* w = body.wire_to(bout(q));
                pass_src.push_back(remap(w->src));
                pass_shape.push_back(w->shape);
                pass_out.push_back(q);
            }
            for (const auto& w : body.wires) {
                if (!w.dst.boundary() && static_cast<BoxId>(w.dst.box) == tid) continue;
                if (!w.src.boundary() && static_cast<BoxId>(w.src.box) == tid) continue;
                if (w.dst.boundary()) continue;
                head.connect(remap(w.src), remap(w.dst), w.shape);
            }
            for (uint32_t p = 0; p < t.ins.size(); ++p) {
                head.outs.push_back(t.ins[p]);
                head.connect(remap(tsrc[p]), bout(static_cast<uint32_t>(head.outs.size() - 1)),
                             t.ins[p]);
            }
            for (size_t k = 0; k < pass_src.size(); ++k) {
                head.outs.push_back(pass_shape[k]);
                head.connect(pass_src[k], bout(static_cast<uint32_t>(head.outs.size() - 1)),
                             pass_shape[k]);
            }
            // tail: t plus identity strands, outputs in the original order
            Diagram tail;
            tail.ins = head.outs;
            tail.outs = body.outs;
            BoxId t2 = tail.add_box(t);
            for (uint32_t p = 0; p < t.ins.size(); ++p) tail.connect(bin(p), port_of(t2, p), t.ins[p]);
            for (uint32_t q = 0; q < body.outs.size(); ++q)
                if (out_from_t[q] >= 0)
                    tail.connect(port_of(t2, static_cast<uint32_t>(out_from_t[q])), bout(q),
                                 body.outs[q]);
            for (size_t k = 0; k < pass_out.size(); ++k)
                tail.connect(bin(static_cast<uint32_t>(t.ins.size() + k)), bout(pass_out[k]),
                             pass_shape[k]);
            // replace the simd box with Simd(head) ; Simd(tail)
            Diagram out = d;
            std::vector<End> in_srcs(s.ins.size());
            std::vector<End> out_dsts(s.outs.size());
            std::vector<Shape> out_shapes(s.outs.size());
            for (uint32_t p = 0; p < s.ins.size(); ++p) {
                in_srcs[p] = source_of(out, port_of(sid, p));
                out.drop_wire_to(port_of(sid, p));
            }
            for (uint32_t p = 0; p < s.outs.size(); ++p) {
                const Wire* w = out.wire_from(port_of(sid, p));
                out_dsts[p] = w->dst;
                out_shapes[p] = w->shape;
                out.drop_wire_from(port_of(sid, p));
            }
            erase_box(out, sid);
            Box hb = make_simd_box(std::make_shared<Diagram>(head), idx, false);
            Box tb = make_simd_box(std::make_shared<Diagram>(tail), idx, false);
            std::vector<Shape> hout = hb.outs, tin = tb.ins;
            BoxId hid = out.add_box(std::move(hb));
            BoxId tid2 = out.add_box(std::move(tb));
            for (uint32_t p = 0; p < in_srcs.size(); ++p)
                out.connect(in_srcs[p], port_of(hid, p), s.ins[p]);
            for (uint32_t p = 0; p < tin.size(); ++p)
                out.connect(port_of(hid, p), port_of(tid2, p), hout[p]);
            for (uint32_t p = 0; p < out_dsts.size(); ++p)
                out.connect(port_of(tid2, p), out_dsts[p], out_shapes[p]);
            return out;
        }
        // merge
        BoxId id1 = m.boxes.at("s1"), id2 = m.boxes.at("s2");
        const Box s1 = need_box(d, id1, BoxKind::Simd, "simd-merge");
        const Box s2 = need_box(d, id2, BoxKind::Simd, "simd-merge");
        DimSym idx = s1.attr_dim("index");
        const Diagram &b1 = *s1.body, &b2 = *s2.body;
        // outer port mapping: s1.out j feeds s2.in port map_j
        std::vector<uint32_t> omap(s1.outs.size());
        for (uint32_t p = 0; p < s1.outs.size(); ++p)
            omap[p] = consumer_of(d, port_of(id1, p)).port;
        Diagram merged;
        merged.ins = b1.ins;
        merged.outs = b2.outs;
        std::map<BoxId, BoxId> m1, m2;
        for (const auto& [bid, bb] : b1.boxes) m1[bid] = merged.add_box(bb);
        for (const auto& [bid, bb] : b2.boxes) m2[bid] = merged.add_box(bb);
        std::vector<End> mid_src(b1.outs.size());
        auto rm1 = [&](End e) {
            return e.boundary() ? e : End{static_cast<int32_t>(m1.at(static_cast<BoxId>(e.box))), e.port};
        };
        auto rm2 = [&](End e) {
            return e.boundary() ? e : End{static_cast<int32_t>(m2.at(static_cast<BoxId>(e.box))), e.port};
        };
        for (const auto& w : b1.wires) {
            if (w.dst.boundary())
                mid_src[w.dst.port] = rm1(w.src);
            else
                merged.connect(rm1(w.src), rm1(w.dst), w.shape);
        }
        for (const auto& w : b2.wires) {
            End src = w.src;
            if (src.boundary()) {
                // body-2 input p corresponds to s1 output j with omap[j] == p
                uint32_t j = 0;
                for (; j < omap.size(); ++j)
                    if (omap[j] == src.port) break;
                merged.connect(mid_src[j], rm2(w.dst), w.shape);
            } else
                merged.connect(rm2(src), w.dst.boundary() ? w.dst : rm2(w.dst), w.shape);
        }
        // stitch outer wires: inputs of s1, outputs of s2
        Diagram out = d;
        std::vector<End> in_srcs(s1.ins.size());
        for (uint32_t p = 0; p < s1.ins.size(); ++p) {
            in_srcs[p] = source_of(out, port_of(id1, p));
            out.drop_wire_to(port_of(id1, p));
        }
        std::vector<End> out_dsts(s2.outs.size());
        std::vector<Shape> out_shapes(s2.outs.size());
        for (uint32_t p = 0; p < s2.outs.size(); ++p) {
            const Wire* w = out.wire_from(port_of(id2, p));
            out_dsts[p] = w->dst;
            out_shapes[p] = w->shape;
            out.drop_wire_from(port_of(id2, p));
        }
        for (uint32_t p = 0; p < s1.outs.size(); ++p) out.drop_wire_from(port_of(id1, p));
        for (uint32_t p = 0; p < s2.ins.size(); ++p) out.drop_wire_to(port_of(id2, p));
        erase_box(out, id1);
        erase_box(out, id2);
        Box nb = make_simd_box(std::make_shared<Diagram>(merged), idx, false);
        BoxId nid = out.add_box(std::move(nb));
        for (uint32_t p = 0; p < in_srcs.size(); ++p)
            out.connect(in_srcs[p], port_of(nid, p), s1.ins[p]);
        for (uint32_t p = 0; p < out_dsts.size(); ++p)
            out.connect(port_of(nid, p), out_dsts[p], out_shapes[p]);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape Dv{D};
        Builder body;
        Val x = body.input(Dv);
        Val y = body.add1(elementwise("exp", Dv), {x});
        body.output(body.add1(elementwise("phi", Dv), {y}));
        Builder outer;
        Val in = outer.input(Shape{S, D});
        Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, false);
        outer.output(outer.add1(sb, {in}));
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// A 0-input box inside a simd body computes the same value in every lane;
// it may be computed once outside and broadcast in.
class PullConstant final : public RewriteRule {
public:
    PullConstant() : RewriteRule("pull-constant", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "constants leave a simd container through a broadcast at the interface";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        if (dir == Direction::Fwd) {
            for (const auto& [sid, s] : d.boxes) {
                if (s.kind != BoxKind::Simd) continue;
                for (const auto& [cid, c] : s.body->boxes) {
                    if (!c.ins.empty() || c.outs.size() != 1) continue;
                    if (c.kind != BoxKind::Primitive && c.kind != BoxKind::Learnable) continue;
                    Match m;
                    m.locator = "b" + std::to_string(sid) + ":c" + std::to_string(cid);
                    m.boxes["s"] = sid;
                    m.boxes["c"] = cid;
                    out.push_back(std::move(m));
                }
            }
        } else {
            for (const auto& [sid, s] : d.boxes) {
                if (s.kind != BoxKind::Simd) continue;
                for (uint32_t p = s.simd_residual() ? 1 : 0; p < s.ins.size(); ++p) {
                    const Wire* w = d.wire_to(port_of(sid, p));
                    if (!w || w->src.boundary()) continue;
                    const Box& bb = d.box(static_cast<BoxId>(w->src.box));
                    if (bb.kind != BoxKind::Primitive || bb.op != "broadcast") continue;
                    if (!bb.attr_dim("index").same_symbol(s.attr_dim("index"))) continue;
                    End csrc = source_of(d, port_of(static_cast<BoxId>(w->src.box), 0));
                    if (csrc.boundary()) continue;
                    const Box& c = d.box(static_cast<BoxId>(csrc.box));
                    if (!c.ins.empty() &&
                        !(c.kind == BoxKind::Primitive || c.kind == BoxKind::Learnable))
                        continue;
                    if (!c.ins.empty()) continue;
                    Match m;
                    m.locator = "b" + std::to_string(sid) + ":p" + std::to_string(p);
                    m.boxes["s"] = sid;
                    m.boxes["bc"] = static_cast<BoxId>(w->src.box);
                    m.boxes["c"] = static_cast<BoxId>(csrc.box);
                    m.ints["p"] = p;
                    out.push_back(std::move(m));
                }
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        if (dir == Direction::Fwd) {
            BoxId sid = m.boxes.at("s");
            const Box s = need_box(d, sid, BoxKind::Simd, "pull-constant");
            BoxId cid = m.boxes.at("c");
            if (!s.body->boxes.count(cid)) throw StaleMatch("pull-constant: constant box gone");
            const Box c = s.body->box(cid);
            DimSym idx = s.attr_dim("index");
            // body loses c, gains a trailing boundary input
            Diagram body2 = *s.body;
            End ccons = consumer_of(body2, port_of(cid, 0));
            Shape cshape = shape_from(body2, port_of(cid, 0));
            body2.drop_wire_from(port_of(cid, 0));
            erase_box(body2, cid);
            body2.ins.push_back(cshape);
            uint32_t newp = static_cast<uint32_t>(body2.ins.size() - 1);
            body2.connect(bin(newp), ccons, cshape);
            auto rb = simdutil::rebuild_simd(d, sid, body2, idx, s.simd_residual(),
                                             iota(s.ins.size()), iota(s.outs.size()));
            Diagram out = std::move(rb.out);
            BoxId cnew = out.add_box(c);
            BoxId bc = out.add_box(broadcast_box(cshape, idx));
            out.connect(port_of(cnew, 0), port_of(bc, 0), cshape);
            out.connect(port_of(bc, 0), port_of(rb.new_box, newp), cshape.prepend(idx));
            return out;
        }
        // bwd: internalize
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "pull-constant");
        BoxId bcid = m.boxes.at("bc"), cid = m.boxes.at("c");
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        const Box c = d.box(cid);
        DimSym idx = s.attr_dim("index");
        Diagram body2 = *s.body;
        // body input p becomes the constant box output
        BoxId cin = body2.add_box(c);
        for (auto& w : body2.wires)
            if (w.src.boundary() && w.src.port == p) w.src = port_of(cin, 0);
        // remove boundary input p (shift)
        body2.ins.erase(body2.ins.begin() + p);
        for (auto& w : body2.wires) {
            if (w.src.boundary() && w.src.port > p) w.src.port--;
        }
        std::vector<int> imap(s.ins.size());
        for (uint32_t k = 0; k < s.ins.size(); ++k)
            imap[k] = k == p ? -1 : (k > p ? static_cast<int>(k) - 1 : static_cast<int>(k));
        auto rb = simdutil::rebuild_simd(d, sid, body2, idx, s.simd_residual(), imap,
                                         iota(s.outs.size()));
        Diagram out = std::move(rb.out);
        out.drop_wire_to(port_of(bcid, 0));
        out.drop_wire_from(port_of(cid, 0));
        erase_box(out, bcid);
        erase_box(out, cid);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape Dv{D};
        Builder body;
        Val x = body.input(Dv);
        Val ones = body.add1(ones_box(D), {});
        body.output(body.add1(add_box(Dv, Dv), {x, ones}));
        Builder outer;
        Val in = outer.input(Shape{S, D});
        outer.output(outer.add1(make_simd_box(std::make_shared<Diagram>(body.finish()), S, false), {in}));
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }

private:
    static std::vector<int> iota(size_t n) {
        std::vector<int> v(n);
        for (size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
        return v;
    }
};

// A box whose inputs are all broadcast into the container is lane-invariant
// and may be computed once outside.
class SimdHoist final : public RewriteRule {
public:
    SimdHoist() : RewriteRule("simd-hoist", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return "lane-invariant subcomputations move out of a simd container";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [sid, s] : d.boxes) {
            if (s.kind != BoxKind::Simd) continue;
            // body inputs fed by an outer broadcast with this index
            std::set<uint32_t> bcast_ports;
            for (uint32_t p = s.simd_residual() ? 1 : 0; p < s.ins.size(); ++p) {
                const Wire* w = d.wire_to(port_of(sid, p));
                if (!w || w->src.boundary()) continue;
                const Box& bb = d.box(static_cast<BoxId>(w->src.box));
                if (bb.kind == BoxKind::Primitive && bb.op == "broadcast" &&
                    bb.attr_dim("index").same_symbol(s.attr_dim("index")))
                    bcast_ports.insert(p);
            }
            if (bcast_ports.empty()) continue;
            for (const auto& [tid, t] : s.body->boxes) {
                if (t.kind == BoxKind::Copy || t.kind == BoxKind::Delete) continue;
                if (t.ins.empty() || t.outs.size() != 1) continue;
                bool invariant = true;
                for (uint32_t p = 0; p < t.ins.size() && invariant; ++p) {
                    End src = resolve_value(*s.body, source_of(*s.body, port_of(tid, p)));
                    if (!src.boundary() || !bcast_ports.count(src.port)) invariant = false;
                }
                if (!invariant) continue;
                Match m;
                m.locator = "b" + std::to_string(sid) + ":t" + std::to_string(tid);
                m.boxes["s"] = sid;
                m.boxes["t"] = tid;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "simd-hoist");
        BoxId tid = m.boxes.at("t");
        if (!s.body->boxes.count(tid)) throw StaleMatch("simd-hoist: box gone");
        const Box t = s.body->box(tid);
        DimSym idx = s.attr_dim("index");

        // Which body boundary input feeds each t input (via copy chains).
        Diagram body2 = *s.body;
        std::vector<uint32_t> feed(t.ins.size());
        for (uint32_t p = 0; p < t.ins.size(); ++p) {
            End src = resolve_value(body2, source_of(body2, port_of(tid, p)));
            feed[p] = src.port;
        }
        // detach t: its direct sources get deletes if they become dangling
        for (uint32_t p = 0; p < t.ins.size(); ++p) {
            End src = source_of(body2, port_of(tid, p));
            body2.drop_wire_to(port_of(tid, p));
            BoxId dl = body2.add_box(delete_box(t.ins[p]));
            body2.connect(src, port_of(dl, 0), t.ins[p]);
        }
        End tcons = consumer_of(body2, port_of(tid, 0));
        Shape tshape = shape_from(body2, port_of(tid, 0));
        body2.drop_wire_from(port_of(tid, 0));
        erase_box(body2, tid);
        body2.ins.push_back(tshape);
        uint32_t newp = static_cast<uint32_t>(body2.ins.size() - 1);
        body2.connect(bin(newp), tcons, tshape);

        std::vector<int> imap(s.ins.size());
        for (uint32_t k = 0; k < s.ins.size(); ++k) imap[k] = static_cast<int>(k);
        std::vector<int> omap(s.outs.size());
        for (uint32_t k = 0; k < s.outs.size(); ++k) omap[k] = static_cast<int>(k);
        // remember pre-broadcast sources before the rebuild invalidates ids
        std::vector<End> pre(s.ins.size(), End{kBoundary, 0});
        std::vector<BoxId> bcs(s.ins.size(), 0);
        for (uint32_t p = 0; p < s.ins.size(); ++p) {
            const Wire* w = d.wire_to(port_of(sid, p));
            if (!w || w->src.boundary()) continue;
            const Box& bb = d.box(static_cast<BoxId>(w->src.box));
            if (bb.kind == BoxKind::Primitive && bb.op == "broadcast") {
                pre[p] = source_of(d, port_of(static_cast<BoxId>(w->src.box), 0));
                bcs[p] = static_cast<BoxId>(w->src.box);
            }
        }
        auto rb = simdutil::rebuild_simd(d, sid, body2, idx, s.simd_residual(), imap, omap);
        Diagram out = std::move(rb.out);
        BoxId tnew = out.add_box(t);
        for (uint32_t p = 0; p < t.ins.size(); ++p) {
            // tap the pre-broadcast value through a copy
            uint32_t sp = feed[p];
            End base = pre[sp];
            BoxId cp = out.add_box(copy_box(t.ins[p]));
            out.drop_wire_to(port_of(bcs[sp], 0));
            out.connect(base, port_of(cp, 0), t.ins[p]);
            out.connect(port_of(cp, 0), port_of(bcs[sp], 0), t.ins[p]);
            out.connect(port_of(cp, 1), port_of(tnew, p), t.ins[p]);
            pre[sp] = port_of(cp, 0);  // unused afterwards, kept consistent
        }
        BoxId bc = out.add_box(broadcast_box(tshape, idx));
        out.connect(port_of(tnew, 0), port_of(bc, 0), tshape);
        out.connect(port_of(bc, 0), port_of(rb.new_box, newp), tshape.prepend(idx));
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d"), E = DimSym::fixed("e");
        Builder body;
        Val x = body.input(Shape{D});
        Val M = body.input(Shape{D, E});
        Val fM = body.add1(elementwise("phi", Shape{D, E}), {M});
        body.output(body.add1(contract_box(Shape{D}, Shape{D, E}, 0, 0), {x, fM}));
        Builder outer;
        Val xs = outer.input(Shape{S, D});
        Val Mv = outer.input(Shape{D, E});
        Val Mb = outer.add1(broadcast_box(Shape{D, E}, S), {Mv});
        Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, false);
        outer.output(outer.add1(sb, {xs, Mb}));
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// Matrix-level contraction <-> per-row simd of a contraction against a
// broadcast operand (the copy-simd structure of matrix multiplication).
class ContractSimdUnfold final : public RewriteRule {
public:
    ContractSimdUnfold() : RewriteRule("contract-simd-unfold", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "a contraction unfolds into per-row contractions inside a simd container";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        if (dir == Direction::Fwd) {
            for (const auto& [id, b] : d.boxes) {
                if (b.kind != BoxKind::Contract) continue;
                int64_t lp = b.attr_i("lpos");
                if (b.ins[0].rank() < 2 || lp < 1) continue;
                Match m;
                m.locator = "b" + std::to_string(id);
                m.boxes["cb"] = id;
                out.push_back(std::move(m));
            }
        } else {
            for (const auto& [sid, s] : d.boxes) {
                if (s.kind != BoxKind::Simd || s.simd_residual()) continue;
                const Diagram& body = *s.body;
                if (body.boxes.size() != 1) continue;
                auto it = body.boxes.begin();
                if (it->second.kind != BoxKind::Contract) continue;
                if (it->second.attr_i("lpos") < 0) continue;
                // in0 lifted directly, in1 broadcast-fed
                End s0 = source_of(body, port_of(it->first, 0));
                End s1 = source_of(body, port_of(it->first, 1));
                if (!s0.boundary() || !s1.boundary() || s0.port != 0 || s1.port != 1) continue;
                if (body.ins.size() != 2 || body.outs.size() != 1) continue;
                const Wire* w1 = d.wire_to(port_of(sid, 1));
                if (!w1 || w1->src.boundary()) continue;
                const Box& bb = d.box(static_cast<BoxId>(w1->src.box));
                if (bb.kind != BoxKind::Primitive || bb.op != "broadcast") continue;
                if (!bb.attr_dim("index").same_symbol(s.attr_dim("index"))) continue;
                Match m;
                m.locator = "b" + std::to_string(sid);
                m.boxes["s"] = sid;
                m.boxes["bc"] = static_cast<BoxId>(w1->src.box);
                m.boxes["cb"] = it->first;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        if (dir == Direction::Fwd) {
            BoxId cid = m.boxes.at("cb");
            const Box cb = need_box(d, cid, BoxKind::Contract, "contract-simd-unfold");
            size_t lp = static_cast<size_t>(cb.attr_i("lpos"));
            size_t rp = static_cast<size_t>(cb.attr_i("rpos"));
            DimSym idx = cb.ins[0].dims[0];
            Shape lane = cb.ins[0].drop(0);
            Diagram body = box_diagram(contract_box(lane, cb.ins[1], lp - 1, rp));
            Diagram out = d;
            End asrc = source_of(out, port_of(cid, 0));
            End bsrc = source_of(out, port_of(cid, 1));
            End dst = consumer_of(out, port_of(cid, 0));
            Shape res = shape_from(out, port_of(cid, 0));
            out.drop_wire_to(port_of(cid, 0));
            out.drop_wire_to(port_of(cid, 1));
            out.drop_wire_from(port_of(cid, 0));
            erase_box(out, cid);
            BoxId bc = out.add_box(broadcast_box(cb.ins[1], idx));
            Box sb = make_simd_box(std::make_shared<Diagram>(body), idx, false);
            BoxId sid = out.add_box(std::move(sb));
            out.connect(bsrc, port_of(bc, 0), cb.ins[1]);
            out.connect(asrc, port_of(sid, 0), cb.ins[0]);
            out.connect(port_of(bc, 0), port_of(sid, 1), cb.ins[1].prepend(idx));
            out.connect(port_of(sid, 0), dst, res);
            return out;
        }
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "contract-simd-unfold");
        BoxId bcid = m.boxes.at("bc");
        const Box cb = s.body->box(m.boxes.at("cb"));
        size_t lp = static_cast<size_t>(cb.attr_i("lpos"));
        size_t rp = static_cast<size_t>(cb.attr_i("rpos"));
        Diagram out = d;
        End asrc = source_of(out, port_of(sid, 0));
        End bsrc = source_of(out, port_of(bcid, 0));
        End dst = consumer_of(out, port_of(sid, 0));
        Shape res = shape_from(out, port_of(sid, 0));
        out.drop_wire_to(port_of(sid, 0));
        out.drop_wire_to(port_of(sid, 1));
        out.drop_wire_to(port_of(bcid, 0));
        out.drop_wire_from(port_of(bcid, 0));
        out.drop_wire_from(port_of(sid, 0));
        erase_box(out, bcid);
        erase_box(out, sid);
        Box nb = contract_box(s.ins[0], cb.ins[1], lp + 1, rp);
        BoxId nid = out.add_box(nb);
        out.connect(asrc, port_of(nid, 0), s.ins[0]);
        out.connect(bsrc, port_of(nid, 1), cb.ins[1]);
        out.connect(port_of(nid, 0), dst, res);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s", "q"), B = DimSym::fixed("b"), C = DimSym::fixed("c");
        Builder bl;
        Val A = bl.input(Shape{S, B});
        Val M = bl.input(Shape{B, C});
        bl.output(bl.add1(contract_box(Shape{S, B}, Shape{B, C}, 1, 0), {A, M}));
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// ---- finite-iteration laws ---------------------------------------------------

// Per-lane pre/post maps move across a residual iteration boundary.
class Tightening final : public RewriteRule {
public:
    Tightening() : RewriteRule("tightening", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return "per-lane maps on non-residual wires move outside a residual iteration";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [sid, s] : d.boxes) {
            if (s.kind != BoxKind::Simd || !s.simd_residual()) continue;
            const Diagram& body = *s.body;
            for (const auto& [tid, t] : body.boxes) {
                if (t.ins.size() != 1 || t.outs.size() != 1) continue;
                if (t.kind == BoxKind::Copy || t.kind == BoxKind::Delete) continue;
                // out-case: t feeds a non-residual boundary output
                const Wire* wo = body.wire_from(port_of(tid, 0));
                if (wo && wo->dst.boundary() && wo->dst.port >= 1) {
                    Match m;
                    m.locator = "b" + std::to_string(sid) + ":out:t" + std::to_string(tid);
                    m.boxes["s"] = sid;
                    m.boxes["t"] = tid;
                    m.ints["case"] = 1;
                    m.ints["q"] = wo->dst.port;
                    out.push_back(std::move(m));
                }
                // in-case: t fed directly by a non-residual boundary input
                const Wire* wi = body.wire_to(port_of(tid, 0));
                if (wi && wi->src.boundary() && wi->src.port >= 1) {
                    Match m;
                    m.locator = "b" + std::to_string(sid) + ":in:t" + std::to_string(tid);
                    m.boxes["s"] = sid;
                    m.boxes["t"] = tid;
                    m.ints["case"] = 0;
                    m.ints["p"] = wi->src.port;
                    out.push_back(std::move(m));
                }
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "tightening");
        BoxId tid = m.boxes.at("t");
        if (!s.body->boxes.count(tid)) throw StaleMatch("tightening: box gone");
        const Box t = s.body->box(tid);
        DimSym idx = s.attr_dim("index");
        Diagram body2 = *s.body;
        std::vector<int> imap(s.ins.size()), omap(s.outs.size());
        for (uint32_t k = 0; k < s.ins.size(); ++k) imap[k] = static_cast<int>(k);
        for (uint32_t k = 0; k < s.outs.size(); ++k) omap[k] = static_cast<int>(k);
        if (m.ints.at("case") == 1) {
            uint32_t q = static_cast<uint32_t>(m.ints.at("q"));
            End src = source_of(body2, port_of(tid, 0));
            body2.drop_wire_to(port_of(tid, 0));
            body2.drop_wire_from(port_of(tid, 0));
            erase_box(body2, tid);
            body2.outs[q] = t.ins[0];
            body2.connect(src, bout(q), t.ins[0]);
            auto rb = simdutil::rebuild_simd(d, sid, body2, idx, true, imap, omap);
            Diagram out = std::move(rb.out);
            // re-route the q output through Simd(t)
            const Wire* w = out.wire_from(port_of(rb.new_box, q));
            End dst = w->dst;
            Shape oshape = w->shape;
            out.drop_wire_from(port_of(rb.new_box, q));
            Box tl = make_simd_box(std::make_shared<Diagram>(box_diagram(t)), idx, false);
            Shape tin = tl.ins[0];
            BoxId tlid = out.add_box(std::move(tl));
            out.connect(port_of(rb.new_box, q), port_of(tlid, 0), tin);
            out.connect(port_of(tlid, 0), dst, oshape);
            return out;
        }
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        End cons = consumer_of(body2, port_of(tid, 0));
        Shape tout = t.outs[0];
        body2.drop_wire_to(port_of(tid, 0));
        body2.drop_wire_from(port_of(tid, 0));
        erase_box(body2, tid);
        body2.ins[p] = tout;
        body2.connect(bin(p), cons, tout);
        auto rb = simdutil::rebuild_simd(d, sid, body2, idx, true, imap, omap);
        Diagram out = std::move(rb.out);
        const Wire* w = out.wire_to(port_of(rb.new_box, p));
        End src = w->src;
        Shape ishape = w->shape;
        out.drop_wire_to(port_of(rb.new_box, p));
        Box tl = make_simd_box(std::make_shared<Diagram>(box_diagram(t)), idx, false);
        Shape tlout = tl.outs[0];
        BoxId tlid = out.add_box(std::move(tl));
        out.connect(src, port_of(tlid, 0), ishape);
        out.connect(port_of(tlid, 0), port_of(rb.new_box, p), tlout);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        DimSym S = DimSym::seq("s"), H = DimSym::fixed("h"), D = DimSym::fixed("d");
        Shape Hs{H}, Ds{D};
        Builder body;
        Val u = body.input(Hs);
        Val a = body.input(Ds);
        Val ga = body.add1(elementwise(seed % 2 ? "exp" : "phi", Ds), {a});
        auto cell = body.add(learnable_box("cell", {Hs, Ds}, {Hs, Ds}), {u, ga});
        body.output(cell[0]);
        body.output(cell[1]);
        Builder outer;
        Val h0 = outer.input(Hs);
        Val xs = outer.input(Shape{S, D});
        Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, true);
        auto r = outer.add(sb, {h0, xs});
        outer.output(r[0]);
        outer.output(r[1]);
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// Iterating the swap cell U=A=B is the shift-and-inject map.
class Yanking final : public RewriteRule {
public:
    Yanking() : RewriteRule("yanking", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "iterating the braid with matching residual is the lane shift map";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        for (const auto& [id, b] : d.boxes) {
            if (dir == Direction::Fwd) {
                if (b.kind != BoxKind::Simd || !b.simd_residual()) continue;
                const Diagram& body = *b.body;
                if (!body.boxes.empty() || body.ins.size() != 2 || body.outs.size() != 2) continue;
                // precondition: U = A = B
                if (!(body.ins[0] == body.ins[1])) continue;
                bool crossed = false;
                int seen = 0;
                for (const auto& w : body.wires) {
                    if (w.src.boundary() && w.dst.boundary()) {
                        ++seen;
                        if ((w.src.port == 0 && w.dst.port == 1) ||
                            (w.src.port == 1 && w.dst.port == 0))
                            crossed = true;
                        else {
                            crossed = false;
                            break;
                        }
                    }
                }
                if (!crossed || seen != 2) continue;
            } else {
                if (b.kind != BoxKind::Primitive || b.op != "shift_inject") continue;
            }
            Match m;
            m.locator = "b" + std::to_string(id);
            m.boxes["s"] = id;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        BoxId sid = m.boxes.at("s");
        if (!d.has_box(sid)) throw StaleMatch("yanking: box gone");
        const Box s = d.box(sid);
        Diagram out = d;
        Box repl;
        if (dir == Direction::Fwd) {
            repl = prim("shift_inject", s.ins, s.outs);
        } else {
            Shape U = s.ins[0];
            Diagram body = swap_diagram(U, U);
            // residual form: ins (U,U) outs (U,U) with crossing wires
            repl = make_simd_box(std::make_shared<Diagram>(body), s.ins[1].dims[0], true);
        }
        std::vector<End> in_srcs(s.ins.size());
        std::vector<End> out_dsts(s.outs.size());
        std::vector<Shape> out_shapes(s.outs.size());
        for (uint32_t p = 0; p < s.ins.size(); ++p) {
            in_srcs[p] = source_of(out, port_of(sid, p));
            out.drop_wire_to(port_of(sid, p));
        }
        for (uint32_t p = 0; p < s.outs.size(); ++p) {
            const Wire* w = out.wire_from(port_of(sid, p));
            out_dsts[p] = w->dst;
            out_shapes[p] = w->shape;
            out.drop_wire_from(port_of(sid, p));
        }
        erase_box(out, sid);
        BoxId nid = out.add_box(repl);
        for (uint32_t p = 0; p < in_srcs.size(); ++p) out.connect(in_srcs[p], port_of(nid, p), s.ins[p]);
        for (uint32_t p = 0; p < out_dsts.size(); ++p)
            out.connect(port_of(nid, p), out_dsts[p], out_shapes[p]);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), H = DimSym::fixed("h");
        Shape U{H};
        Builder outer;
        Val u = outer.input(U);
        Val lanes = outer.input(U.prepend(S));
        Box sb = make_simd_box(std::make_shared<Diagram>(swap_diagram(U, U)), S, true);
        auto r = outer.add(sb, {u, lanes});
        outer.output(r[0]);
        outer.output(r[1]);
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// An untouched strand passes straight through the container. Covers both a
// pass-through lane wire and a pass-through residual (which degrades the
// fold to plain parallel iteration).
class Strength final : public RewriteRule {
public:
    Strength() : RewriteRule("strength", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return "untouched strands (lane or residual) leave the container";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [sid, s] : d.boxes) {
            if (s.kind != BoxKind::Simd) continue;
            const Diagram& body = *s.body;
            bool res = s.simd_residual();
            for (const auto& w : body.wires) {
                if (!w.src.boundary() || !w.dst.boundary()) continue;
                bool residual_strand = res && w.src.port == 0 && w.dst.port == 0;
                bool lane_strand = (!res || (w.src.port >= 1 && w.dst.port >= 1));
                if (!residual_strand && !lane_strand) continue;
                if (!residual_strand && body.ins.size() <= 1) continue;  // nothing else inside
                Match m;
                m.locator = "b" + std::to_string(sid) + ":p" + std::to_string(w.src.port) + "q" +
                            std::to_string(w.dst.port);
                m.boxes["s"] = sid;
                m.ints["p"] = w.src.port;
                m.ints["q"] = w.dst.port;
                m.ints["residual"] = residual_strand ? 1 : 0;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "strength");
        DimSym idx = s.attr_dim("index");
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        uint32_t q = static_cast<uint32_t>(m.ints.at("q"));
        bool was_residual = m.ints.at("residual") != 0;
        Diagram body2 = simdutil::drop_strand(*s.body, p, q);
        std::vector<int> imap(s.ins.size()), omap(s.outs.size());
        for (uint32_t k = 0; k < s.ins.size(); ++k)
            imap[k] = k == p ? -1 : (k > p ? static_cast<int>(k) - 1 : static_cast<int>(k));
        for (uint32_t k = 0; k < s.outs.size(); ++k)
            omap[k] = k == q ? -1 : (k > q ? static_cast<int>(k) - 1 : static_cast<int>(k));
        End src = source_of(d, port_of(sid, p));
        End dst = consumer_of(d, port_of(sid, q));
        Shape strand = s.ins[p];
        bool still_residual = s.simd_residual() && !was_residual;
        auto rb = simdutil::rebuild_simd(d, sid, body2, idx, still_residual, imap, omap);
        Diagram out = std::move(rb.out);
        out.connect(src, dst, strand);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        DimSym S = DimSym::seq("s"), H = DimSym::fixed("h"), D = DimSym::fixed("d");
        Shape Hs{H}, Ds{D};
        if (seed % 2 == 0) {
            // residual pass-through around a per-lane map
            Builder body;
            Val u = body.input(Hs);
            Val a = body.input(Ds);
            body.output(u);
            body.output(body.add1(learnable_box("g", {Ds}, {Ds}), {a}));
            Builder outer;
            Val h0 = outer.input(Hs);
            Val xs = outer.input(Shape{S, D});
            Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, true);
            auto r = outer.add(sb, {h0, xs});
            outer.output(r[0]);
            outer.output(r[1]);
            RuleInstance inst;
            inst.diagram = outer.finish();
            auto ms = find(inst.diagram, Direction::Fwd);
            if (ms.empty()) return std::nullopt;
            inst.match = ms.front();
            return inst;
        }
        // plain lane strand next to a real fold
        Builder body;
        Val u = body.input(Hs);
        Val a = body.input(Ds);
        Val c = body.input(Ds);
        auto cell = body.add(learnable_box("cell", {Hs, Ds}, {Hs, Ds}), {u, a});
        body.output(cell[0]);
        body.output(cell[1]);
        body.output(c);
        Builder outer;
        Val h0 = outer.input(Hs);
        Val xs = outer.input(Shape{S, D});
        Val cs = outer.input(Shape{S, D});
        Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, true);
        auto r = outer.add(sb, {h0, xs, cs});
        outer.output(r[0]);
        outer.output(r[1]);
        outer.output(r[2]);
        RuleInstance inst;
        inst.diagram = outer.finish();
        for (const auto& mm : find(inst.diagram, Direction::Fwd)) {
            if (mm.ints.at("residual") == 0) {
                inst.match = mm;
                return inst;
            }
        }
        return std::nullopt;
    }
};

// Slide a residual endomap around the iteration boundary:
//   g_after . <f . (g (x) 1)>  =  <(g (x) 1) . f> . g_before
class Sliding final : public RewriteRule {
public:
    explicit Sliding(int variant)
        : RewriteRule(variant == 1 ? "sliding-1" : "sliding-2", RuleKind::Semantic),
          variant_(variant) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return variant_ == 1 ? "slide a residual endomap from inside-entry to inside-exit"
                             : "slide a residual endomap from inside-exit to inside-entry";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [sid, s] : d.boxes) {
            if (s.kind != BoxKind::Simd || !s.simd_residual()) continue;
            const Diagram& body = *s.body;
            if (variant_ == 1) {
                // g consumes the body residual input; a matching g' consumes
                // the container's residual output outside
                const Wire* wi = body.wire_to(End{kBoundary, 0});
                (void)wi;
                const Wire* win = nullptr;
                for (const auto& w : body.wires)
                    if (w.src.boundary() && w.src.port == 0) win = &w;
                if (!win || win->dst.boundary()) continue;
                BoxId gid = static_cast<BoxId>(win->dst.box);
                const Box& g = body.box(gid);
                if (g.ins.size() != 1 || g.outs.size() != 1 || !(g.ins[0] == g.outs[0])) continue;
                const Wire* wout = d.wire_from(port_of(sid, 0));
                if (!wout || wout->dst.boundary()) continue;
                BoxId gpid = static_cast<BoxId>(wout->dst.box);
                const Box& gp = d.box(gpid);
                if (!rules::CopyNaturality::same_function(g, gp)) continue;
                Match m;
                m.locator = "b" + std::to_string(sid);
                m.boxes["s"] = sid;
                m.boxes["g"] = gid;
                m.boxes["gp"] = gpid;
                out.push_back(std::move(m));
            } else {
                // g produces the body residual output; matching g' feeds the
                // container's residual input outside
                const Wire* win = nullptr;
                for (const auto& w : body.wires)
                    if (w.dst.boundary() && w.dst.port == 0) win = &w;
                if (!win || win->src.boundary()) continue;
                BoxId gid = static_cast<BoxId>(win->src.box);
                const Box& g = body.box(gid);
                if (g.ins.size() != 1 || g.outs.size() != 1 || !(g.ins[0] == g.outs[0])) continue;
                const Wire* wout = d.wire_to(port_of(sid, 0));
                if (!wout || wout->src.boundary()) continue;
                BoxId gpid = static_cast<BoxId>(wout->src.box);
                const Box& gp = d.box(gpid);
                if (!rules::CopyNaturality::same_function(g, gp)) continue;
                Match m;
                m.locator = "b" + std::to_string(sid);
                m.boxes["s"] = sid;
                m.boxes["g"] = gid;
                m.boxes["gp"] = gpid;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "sliding");
        BoxId gid = m.boxes.at("g"), gpid = m.boxes.at("gp");
        if (!s.body->boxes.count(gid) || !d.has_box(gpid)) throw StaleMatch("sliding: box gone");
        const Box g = s.body->box(gid);
        DimSym idx = s.attr_dim("index");
        Diagram body2 = *s.body;
        if (variant_ == 1) {
            // inside: residual-in -> g -> rest  becomes  rest -> g -> residual-out
            End gcons = consumer_of(body2, port_of(gid, 0));
            body2.drop_wire_to(port_of(gid, 0));
            body2.drop_wire_from(port_of(gid, 0));
            body2.connect(bin(0), gcons, g.ins[0]);
            End res_src = source_of(body2, End{kBoundary, 0});
            // rewire: res_src -> g -> bout 0
            for (auto& w : body2.wires)
                if (w.dst.boundary() && w.dst.port == 0) {
                    w.dst = port_of(gid, 0);
                    break;
                }
            body2.connect(port_of(gid, 0), bout(0), g.outs[0]);
            (void)res_src;
        } else {
            // inside: rest -> g -> residual-out  becomes  residual-in -> g -> rest
            End gsrc = source_of(body2, port_of(gid, 0));
            body2.drop_wire_to(port_of(gid, 0));
            body2.drop_wire_from(port_of(gid, 0));
            body2.connect(gsrc, bout(0), g.outs[0]);
            for (auto& w : body2.wires)
                if (w.src.boundary() && w.src.port == 0) {
                    w.src = port_of(gid, 0);
                    break;
                }
            body2.connect(bin(0), port_of(gid, 0), g.ins[0]);
        }
        std::vector<int> imap(s.ins.size()), omap(s.outs.size());
        for (uint32_t k = 0; k < s.ins.size(); ++k) imap[k] = static_cast<int>(k);
        for (uint32_t k = 0; k < s.outs.size(); ++k) omap[k] = static_cast<int>(k);
        auto rb = simdutil::rebuild_simd(d, sid, body2, idx, true, imap, omap);
        Diagram out = std::move(rb.out);
        // move the outer g' to the other side of the container
        if (variant_ == 1) {
            End gp_dst = consumer_of(out, port_of(gpid, 0));
            Shape U = g.ins[0];
            out.drop_wire_to(port_of(gpid, 0));
            out.drop_wire_from(port_of(gpid, 0));
            End res_src = source_of(out, port_of(rb.new_box, 0));
            out.drop_wire_to(port_of(rb.new_box, 0));
            out.connect(res_src, port_of(gpid, 0), U);
            out.connect(port_of(gpid, 0), port_of(rb.new_box, 0), U);
            out.connect(port_of(rb.new_box, 0), gp_dst, U);
        } else {
            End gp_src = source_of(out, port_of(gpid, 0));
            Shape U = g.ins[0];
            out.drop_wire_to(port_of(gpid, 0));
            out.drop_wire_from(port_of(gpid, 0));
            End res_dst = consumer_of(out, port_of(rb.new_box, 0));
            out.drop_wire_from(port_of(rb.new_box, 0));
            out.connect(gp_src, port_of(rb.new_box, 0), U);
            out.connect(port_of(rb.new_box, 0), port_of(gpid, 0), U);
            out.connect(port_of(gpid, 0), res_dst, U);
        }
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), H = DimSym::fixed("h"), D = DimSym::fixed("d");
        Shape Hs{H}, Ds{D};
        Builder body;
        Val u = body.input(Hs);
        Val a = body.input(Ds);
        if (variant_ == 1) {
            Val gu = body.add1(learnable_box("g", {Hs}, {Hs}), {u});
            auto cell = body.add(learnable_box("cell", {Hs, Ds}, {Hs, Ds}), {gu, a});
            body.output(cell[0]);
            body.output(cell[1]);
        } else {
            auto cell = body.add(learnable_box("cell", {Hs, Ds}, {Hs, Ds}), {u, a});
            Val gu = body.add1(learnable_box("g", {Hs}, {Hs}), {cell[0]});
            body.output(gu);
            body.output(cell[1]);
        }
        Builder outer;
        Val h0 = outer.input(Hs);
        Val xs = outer.input(Shape{S, D});
        Box sb = make_simd_box(std::make_shared<Diagram>(body.finish()), S, true);
        if (variant_ == 1) {
            auto r = outer.add(sb, {h0, xs});
            Val gafter = outer.add1(learnable_box("g", {Hs}, {Hs}), {r[0]});
            outer.output(gafter);
            outer.output(r[1]);
        } else {
            Val gbefore = outer.add1(learnable_box("g", {Hs}, {Hs}), {h0});
            auto r = outer.add(sb, {gbefore, xs});
            outer.output(r[0]);
            outer.output(r[1]);
        }
        RuleInstance inst;
        inst.diagram = outer.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }

private:
    int variant_;
};

// Nested iteration over literal counts flattens to a single iteration over
// the product, modulo lane reshapes.
class Vanishing final : public RewriteRule {
public:
    Vanishing() : RewriteRule("vanishing", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return "nested literal-count containers flatten to the product count";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [sid, s] : d.boxes) {
            if (s.kind != BoxKind::Simd) continue;
            if (s.attr_dim("index").kind != DimKind::Lit) continue;
            const Diagram& body = *s.body;
            if (body.boxes.size() != 1) continue;
            auto it = body.boxes.begin();
            const Box& t = it->second;
            if (t.kind != BoxKind::Simd) continue;
            if (t.attr_dim("index").kind != DimKind::Lit) continue;
            if (s.simd_residual() != t.simd_residual()) continue;
            // all body wires must be straight pass-throughs to the inner box
            bool clean = true;
            for (const auto& w : body.wires) {
                bool into = w.src.boundary() && !w.dst.boundary() && w.src.port == w.dst.port;
                bool outof = !w.src.boundary() && w.dst.boundary() && w.src.port == w.dst.port;
                if (!into && !outof) clean = false;
            }
            if (!clean) continue;
            Match m;
            m.locator = "b" + std::to_string(sid);
            m.boxes["s"] = sid;
            m.boxes["t"] = it->first;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId sid = m.boxes.at("s");
        const Box s = need_box(d, sid, BoxKind::Simd, "vanishing");
        const Box t = s.body->box(m.boxes.at("t"));
        int64_t a = s.attr_dim("index").lit, b = t.attr_dim("index").lit;
        DimSym merged = DimSym::of(a * b);
        bool res = s.simd_residual();
        Box nb = make_simd_box(t.body, merged, res);
        Diagram out = d;
        std::vector<End> in_srcs(s.ins.size());
        std::vector<End> out_dsts(s.outs.size());
        std::vector<Shape> out_shapes(s.outs.size());
        for (uint32_t p = 0; p < s.ins.size(); ++p) {
            in_srcs[p] = source_of(out, port_of(sid, p));
            out.drop_wire_to(port_of(sid, p));
        }
        for (uint32_t p = 0; p < s.outs.size(); ++p) {
            const Wire* w = out.wire_from(port_of(sid, p));
            out_dsts[p] = w->dst;
            out_shapes[p] = w->shape;
            out.drop_wire_from(port_of(sid, p));
        }
        erase_box(out, sid);
        std::vector<Shape> nins = nb.ins, nouts = nb.outs;
        BoxId nid = out.add_box(std::move(nb));
        for (uint32_t p = 0; p < in_srcs.size(); ++p) {
            if (res && p == 0) {
                out.connect(in_srcs[p], port_of(nid, p), s.ins[p]);
                continue;
            }
            BoxId rs = out.add_box(reshape_box(s.ins[p], nins[p]));
            out.connect(in_srcs[p], port_of(rs, 0), s.ins[p]);
            out.connect(port_of(rs, 0), port_of(nid, p), nins[p]);
        }
        for (uint32_t p = 0; p < out_dsts.size(); ++p) {
            if (res && p == 0) {
                out.connect(port_of(nid, p), out_dsts[p], out_shapes[p]);
                continue;
            }
            BoxId rs = out.add_box(reshape_box(nouts[p], s.outs[p]));
            out.connect(port_of(nid, p), port_of(rs, 0), nouts[p]);
            out.connect(port_of(rs, 0), out_dsts[p], out_shapes[p]);
        }
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        int64_t ks[] = {1, 2, 3, 5};
        int64_t a = ks[seed % 4], b = ks[(seed / 4) % 4];
        DimSym D = DimSym::fixed("d");
        Shape Ds{D};
        Diagram inner = box_diagram(learnable_box("g", {Ds}, {Ds}));
        Diagram mid = make_simd(inner, DimSym::of(b));
        Diagram outer = make_simd(mid, DimSym::of(a));
        RuleInstance inst;
        inst.diagram = outer;
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// Reversal along the lane axis commutes with per-lane maps.
class ReverseSimdCommute final : public RewriteRule {
public:
    ReverseSimdCommute() : RewriteRule("reverse-simd-commute", RuleKind::Semantic) {}
    bool supports(Direction) const override { return true; }
    std::string describe() const override {
        return "lane reversal commutes with parallel per-lane maps";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        for (const auto& [rid, r] : d.boxes) {
            if (r.kind != BoxKind::Reverse || r.attr_i("axis") != 0) continue;
            if (dir == Direction::Fwd) {
                // reverse ; simd -> simd ; reverse
                End cons = d.wire_from(port_of(rid, 0)) ? consumer_of(d, port_of(rid, 0))
                                                        : End{kBoundary, 0};
                if (cons.boundary()) continue;
                const Box& s = d.box(static_cast<BoxId>(cons.box));
                if (s.kind != BoxKind::Simd || s.simd_residual()) continue;
                if (s.ins.size() != 1 || s.outs.size() != 1) continue;
                Match m;
                m.locator = "b" + std::to_string(rid);
                m.boxes["r"] = rid;
                m.boxes["s"] = static_cast<BoxId>(cons.box);
                out.push_back(std::move(m));
            } else {
                const Wire* w = d.wire_to(port_of(rid, 0));
                if (!w || w->src.boundary()) continue;
                const Box& s = d.box(static_cast<BoxId>(w->src.box));
                if (s.kind != BoxKind::Simd || s.simd_residual()) continue;
                if (s.ins.size() != 1 || s.outs.size() != 1) continue;
                Match m;
                m.locator = "b" + std::to_string(rid);
                m.boxes["r"] = rid;
                m.boxes["s"] = static_cast<BoxId>(w->src.box);
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        BoxId rid = m.boxes.at("r"), sid = m.boxes.at("s");
        const Box r = need_box(d, rid, BoxKind::Reverse, "reverse-simd-commute");
        const Box s = need_box(d, sid, BoxKind::Simd, "reverse-simd-commute");
        Diagram out = d;
        if (dir == Direction::Fwd) {
            End src = source_of(out, port_of(rid, 0));
            End dst = consumer_of(out, port_of(sid, 0));
            Shape sout = shape_from(out, port_of(sid, 0));
            out.drop_wire_to(port_of(rid, 0));
            out.drop_wire_from(port_of(rid, 0));
            out.drop_wire_to(port_of(sid, 0));
            out.drop_wire_from(port_of(sid, 0));
            Box r2 = reverse_box(sout, 0);
            BoxId r2id = out.add_box(r2);
            erase_box(out, rid);
            out.connect(src, port_of(sid, 0), s.ins[0]);
            out.connect(port_of(sid, 0), port_of(r2id, 0), sout);
            out.connect(port_of(r2id, 0), dst, sout);
            return out;
        }
        End src = source_of(out, port_of(sid, 0));
        End dst = consumer_of(out, port_of(rid, 0));
        Shape sin = s.ins[0];
        out.drop_wire_to(port_of(sid, 0));
        out.drop_wire_from(port_of(sid, 0));
        out.drop_wire_to(port_of(rid, 0));
        out.drop_wire_from(port_of(rid, 0));
        Box r2 = reverse_box(sin, 0);
        BoxId r2id = out.add_box(r2);
        erase_box(out, rid);
        out.connect(src, port_of(r2id, 0), sin);
        out.connect(port_of(r2id, 0), port_of(sid, 0), sin);
        out.connect(port_of(sid, 0), dst, s.outs[0]);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Builder bl;
        Val x = bl.input(Shape{S, D});
        Val rx = bl.add1(reverse_box(Shape{S, D}, 0), {x});
        Box sb = make_simd_box(
            std::make_shared<Diagram>(box_diagram(learnable_box("g", {Shape{D}}, {Shape{D}}))), S,
            false);
        bl.output(bl.add1(sb, {rx}));
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// Double reversal along the same axis cancels.
class ReverseInvolution final : public RewriteRule {
public:
    ReverseInvolution() : RewriteRule("reverse-involution", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override { return "reversal is an involution"; }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [rid, r] : d.boxes) {
            if (r.kind != BoxKind::Reverse) continue;
            const Wire* w = d.wire_to(port_of(rid, 0));
            if (!w || w->src.boundary()) continue;
            const Box& r1 = d.box(static_cast<BoxId>(w->src.box));
            if (r1.kind != BoxKind::Reverse || r1.attr_i("axis") != r.attr_i("axis")) continue;
            Match m;
            m.locator = "b" + std::to_string(rid);
            m.boxes["r2"] = rid;
            m.boxes["r1"] = static_cast<BoxId>(w->src.box);
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId r1 = m.boxes.at("r1"), r2 = m.boxes.at("r2");
        need_box(d, r1, BoxKind::Reverse, "reverse-involution");
        need_box(d, r2, BoxKind::Reverse, "reverse-involution");
        Diagram out = d;
        End src = source_of(out, port_of(r1, 0));
        End dst = consumer_of(out, port_of(r2, 0));
        Shape sh = shape_from(out, port_of(r2, 0));
        out.drop_wire_to(port_of(r1, 0));
        out.drop_wire_from(port_of(r1, 0));
        out.drop_wire_to(port_of(r2, 0));
        out.drop_wire_from(port_of(r2, 0));
        erase_box(out, r1);
        erase_box(out, r2);
        out.connect(src, dst, sh);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape SD{S, D};
        Builder bl;
        Val x = bl.input(SD);
        Val a = bl.add1(reverse_box(SD, 0), {x});
        Val b = bl.add1(reverse_box(SD, 0), {a});
        bl.output(bl.add1(elementwise("exp", SD), {b}));
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// ---- expressivity rules ------------------------------------------------------

// Substitute a learnable box by a concrete composite of matching type
// (which may itself contain learnable boxes). Instances carry a plug
// factory; the substitution direction is forward only.
class UaSubstitute final : public RewriteRule {
public:
    using PlugFactory = std::function<std::optional<Diagram>(const Box& ua)>;

    UaSubstitute(std::string plug_name, PlugFactory f)
        : RewriteRule("ua-subst:" + plug_name, RuleKind::Expressivity), factory_(std::move(f)) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return false; }
    std::string describe() const override {
        return "specialize a learnable box to a composite of its type";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [id, b] : d.boxes) {
            if (b.kind != BoxKind::Learnable) continue;
            auto plug = factory_(b);
            if (!plug) continue;
            Match m;
            m.locator = "b" + std::to_string(id);
            m.boxes["ua"] = id;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId id = m.boxes.at("ua");
        const Box& b = need_box(d, id, BoxKind::Learnable, name());
        auto plug = factory_(b);
        if (!plug) throw StaleMatch(name() + ": box no longer matches the plug");
        return splice_replace(d, id, *plug);
    }

private:
    PlugFactory factory_;
};

// Specialize a learnable endomorphism to the identity (dropping the box).
class UaDrop final : public RewriteRule {
public:
    UaDrop() : RewriteRule("ua-drop", RuleKind::Expressivity) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return "specialize a learnable endomorphism to the identity";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [id, b] : d.boxes) {
            if (b.kind != BoxKind::Learnable) continue;
            if (b.ins.size() != 1 || b.outs.size() != 1 || !(b.ins[0] == b.outs[0])) continue;
            Match m;
            m.locator = "b" + std::to_string(id);
            m.boxes["ua"] = id;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId id = m.boxes.at("ua");
        const Box b = need_box(d, id, BoxKind::Learnable, "ua-drop");
        Diagram out = d;
        End src = source_of(out, port_of(id, 0));
        End dst = consumer_of(out, port_of(id, 0));
        Shape sh = shape_from(out, port_of(id, 0));
        out.drop_wire_to(port_of(id, 0));
        out.drop_wire_from(port_of(id, 0));
        erase_box(out, id);
        out.connect(src, dst, sh);
        (void)b;
        return out;
    }
};

// Two sequentially composed learnables fuse into one; the witness stacks
// the affine layers, so the transport is exact.
class UaFusion final : public RewriteRule {
public:
    UaFusion() : RewriteRule("ua-fusion", RuleKind::Expressivity) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return "two sequentially composed learnable boxes become one";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [gid, g] : d.boxes) {
            if (g.kind != BoxKind::Learnable || g.ins.size() != 1 || g.outs.size() != 1) continue;
            const Wire* w = d.wire_to(port_of(gid, 0));
            if (!w || w->src.boundary()) continue;
            const Box& f = d.box(static_cast<BoxId>(w->src.box));
            if (f.kind != BoxKind::Learnable || f.ins.size() != 1 || f.outs.size() != 1) continue;
            Match m;
            m.locator = "b" + std::to_string(w->src.box) + ">b" + std::to_string(gid);
            m.boxes["f"] = static_cast<BoxId>(w->src.box);
            m.boxes["g"] = gid;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId fid = m.boxes.at("f"), gid = m.boxes.at("g");
        const Box f = need_box(d, fid, BoxKind::Learnable, "ua-fusion");
        const Box g = need_box(d, gid, BoxKind::Learnable, "ua-fusion");
        Diagram out = d;
        End src = source_of(out, port_of(fid, 0));
        End dst = consumer_of(out, port_of(gid, 0));
        Shape oshape = shape_from(out, port_of(gid, 0));
        out.drop_wire_to(port_of(fid, 0));
        out.drop_wire_from(port_of(fid, 0));
        out.drop_wire_to(port_of(gid, 0));
        out.drop_wire_from(port_of(gid, 0));
        erase_box(out, fid);
        erase_box(out, gid);
        BoxId h = out.add_box(learnable_box(fused_id(f.op, g.op), {f.ins[0]}, {g.outs[0]}));
        out.connect(src, port_of(h, 0), f.ins[0]);
        out.connect(port_of(h, 0), dst, oshape);
        return out;
    }

    std::optional<ParamStore> witness(const Diagram& d, const Match& m,
                                      const ParamStore& lhs) const override {
        const Box& f = d.box(m.boxes.at("f"));
        const Box& g = d.box(m.boxes.at("g"));
        ParamStore out;
        ParamEntryT<double> fused;
        fused.kind = ParamEntryT<double>::Kind::Mlp;
        const auto& fm = lhs.at(f.op).mlp;
        const auto& gm = lhs.at(g.op).mlp;
        fused.mlp.layers = fm.layers;
        fused.mlp.layers.insert(fused.mlp.layers.end(), gm.layers.begin(), gm.layers.end());
        out.entries.emplace(fused_id(f.op, g.op), std::move(fused));
        return out;
    }

    static std::string fused_id(const std::string& f, const std::string& g) {
        return "fuse(" + f + ";" + g + ")";
    }
};

namespace witnessutil {

// Relative widths of a concat's arguments, in common units (literal widths,
// or multiples of one shared symbol). Empty when the widths mix unrelated
// symbols.
inline std::optional<std::vector<int64_t>> concat_arg_units(const Box& cc) {
    std::vector<int64_t> units;
    bool all_lit = true;
    for (const auto& a : cc.ins) all_lit &= a.dims.back().kind == DimKind::Lit;
    if (all_lit) {
        for (const auto& a : cc.ins) units.push_back(a.dims.back().lit);
        return units;
    }
    const DimSym& d0 = cc.ins[0].dims.back();
    for (const auto& a : cc.ins) {
        const DimSym& da = a.dims.back();
        if (da.kind == DimKind::Lit || da.kind != d0.kind || da.name != d0.name)
            return std::nullopt;
        units.push_back(da.mult);
    }
    return units;
}

template <typename R>
bool standard_act_pattern(const MlpT<R>& m) {
    for (size_t i = 0; i + 1 < m.layers.size(); ++i)
        if (!m.layers[i].act) return false;
    return m.layers.empty() || !m.layers.back().act;
}

// Compose an affine stack f into the block at [off, off + f_out) of a
// concat-consuming mlp u, passing the complement through exactly. f's
// layers run first, carrying the complement as a (positive, negative)
// pair that ReLU leaves invariant; f's final affine layer folds into u's
// first layer, reconstructing the complement as pair difference.
template <typename R>
MlpT<R> absorb_into_block(const MlpT<R>& f, const MlpT<R>& u, int64_t off, int64_t head_w,
                          int64_t tail_w) {
    if (u.layers.empty()) throw ShapeFault("block absorption needs a non-identity target mlp");
    if (f.layers.empty()) return u;
    const auto& u1 = u.layers.front();
    int64_t uw_out = u1.W.shape[0];
    int64_t fw_in = f.layers.front().W.shape[1];
    int64_t fw_out = f.layers.back().W.shape[0];
    int64_t comp_w = head_w + tail_w;

    auto at = [](const TensorT<R>& W, int64_t r, int64_t c) {
        return W.data[static_cast<size_t>(r * W.shape[1] + c)];
    };

    MlpT<R> out;
    size_t L = f.layers.size();
    for (size_t li = 0; li < L; ++li) {
        const auto& lf = f.layers[li];
        int64_t fin = lf.W.shape[1], fout = lf.W.shape[0];
        bool first = li == 0;
        int64_t in_w = first ? head_w + fw_in + tail_w : fin + 2 * comp_w;
        int64_t out_w = fout + 2 * comp_w;
        TensorT<R> W({out_w, in_w});
        TensorT<R> b({out_w});
        for (int64_t r = 0; r < fout; ++r) {
            for (int64_t c = 0; c < fin; ++c) {
                int64_t cc = first ? head_w + c : c;
                W.data[static_cast<size_t>(r * in_w + cc)] = at(lf.W, r, c);
            }
            b.data[static_cast<size_t>(r)] = lf.b.data[static_cast<size_t>(r)];
        }
        for (int64_t r = 0; r < comp_w; ++r) {
            if (first) {
                int64_t src = r < head_w ? r : fw_in + r;  // head cols, then tail cols
                W.data[static_cast<size_t>((fout + r) * in_w + src)] = R(1);
                W.data[static_cast<size_t>((fout + comp_w + r) * in_w + src)] = R(-1);
            } else {
                W.data[static_cast<size_t>((fout + r) * in_w + fin + r)] = R(1);
                W.data[static_cast<size_t>((fout + comp_w + r) * in_w + fin + comp_w + r)] = R(1);
            }
        }
        out.layers.push_back({std::move(W), std::move(b), lf.act});
    }
    // Reconstruction + u's first layer, folded with f's last affine layer.
    int64_t in_w = fw_out + 2 * comp_w;
    TensorT<R> W({uw_out, in_w});
    TensorT<R> b = u1.b;
    for (int64_t r = 0; r < uw_out; ++r) {
        for (int64_t c = 0; c < fw_out; ++c)
            W.data[static_cast<size_t>(r * in_w + c)] = at(u1.W, r, off + c);
        for (int64_t c = 0; c < comp_w; ++c) {
            int64_t uco = c < head_w ? c : off + fw_out + (c - head_w);
            R w = at(u1.W, r, uco);
            W.data[static_cast<size_t>(r * in_w + fw_out + c)] += w;
            W.data[static_cast<size_t>(r * in_w + fw_out + comp_w + c)] -= w;
        }
    }
    MlpT<R> folded;
    folded.layers.assign(out.layers.begin(), out.layers.end() - 1);
    const auto& lastf = out.layers.back();
    int64_t mid = lastf.W.shape[0];
    int64_t innw = lastf.W.shape[1];
    TensorT<R> Wc({uw_out, innw});
    TensorT<R> bc = b;
    for (int64_t r = 0; r < uw_out; ++r)
        for (int64_t k = 0; k < mid; ++k) {
            R wrk = W.data[static_cast<size_t>(r * in_w + k)];
            if (wrk == R(0)) continue;
            for (int64_t c = 0; c < innw; ++c)
                Wc.data[static_cast<size_t>(r * innw + c)] +=
                    wrk * lastf.W.data[static_cast<size_t>(k * innw + c)];
            bc.data[static_cast<size_t>(r)] += wrk * lastf.b.data[static_cast<size_t>(k)];
        }
    folded.layers.push_back({std::move(Wc), std::move(bc), u1.act});
    for (size_t li = 1; li < u.layers.size(); ++li) folded.layers.push_back(u.layers[li]);
    return folded;
}

}  // namespace witnessutil

// Two arguments of a concat feeding a learnable box carry the same value:
// one of them is redundant. With two arguments this is the familiar
// copy-then-merge pattern collapsing to a single learnable box on the wire.
class CopyConcatCollapse final : public RewriteRule {
public:
    CopyConcatCollapse() : RewriteRule("copy-concat-collapse", RuleKind::Expressivity) {}
    bool supports(Direction) const override { return true; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return "merging duplicated streams is no more expressive than one learnable box";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction dir) const override {
        std::vector<Match> out;
        if (dir == Direction::Fwd) {
            for (const auto& [ccid, cc] : d.boxes) {
                if (cc.kind != BoxKind::Primitive || cc.op != "concat") continue;
                End ucons = d.wire_from(port_of(ccid, 0)) ? consumer_of(d, port_of(ccid, 0))
                                                          : End{kBoundary, 0};
                if (ucons.boundary()) continue;
                const Box& u = d.box(static_cast<BoxId>(ucons.box));
                if (u.kind != BoxKind::Learnable || u.ins.size() != 1 || u.outs.size() != 1)
                    continue;
                std::vector<End> vals;
                for (uint32_t p = 0; p < cc.ins.size(); ++p)
                    vals.push_back(resolve_value(d, source_of(d, port_of(ccid, p))));
                bool found = false;
                for (uint32_t i = 0; i < vals.size() && !found; ++i)
                    for (uint32_t j = i + 1; j < vals.size() && !found; ++j) {
                        if (!(vals[i] == vals[j])) continue;
                        if (!(cc.ins[i] == cc.ins[j])) continue;
                        Match m;
                        m.locator = "b" + std::to_string(ccid) + ":" + std::to_string(i) + "," +
                                    std::to_string(j);
                        m.boxes["concat"] = ccid;
                        m.boxes["ua"] = static_cast<BoxId>(ucons.box);
                        m.ints["i"] = i;
                        m.ints["j"] = j;
                        out.push_back(std::move(m));
                        found = true;
                    }
            }
        } else {
            for (const auto& [uid, u] : d.boxes) {
                if (u.kind != BoxKind::Learnable || u.ins.size() != 1 || u.outs.size() != 1)
                    continue;
                if (u.ins[0].rank() < 1) continue;
                Match m;
                m.locator = "b" + std::to_string(uid);
                m.boxes["ua"] = uid;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const override {
        if (dir == Direction::Fwd) {
            BoxId ccid = m.boxes.at("concat"), uid = m.boxes.at("ua");
            const Box cc = need_box(d, ccid, BoxKind::Primitive, "copy-concat-collapse");
            const Box u = need_box(d, uid, BoxKind::Learnable, "copy-concat-collapse");
            uint32_t i = static_cast<uint32_t>(m.ints.at("i"));
            uint32_t j = static_cast<uint32_t>(m.ints.at("j"));
            Diagram out = d;
            End dst = consumer_of(out, port_of(uid, 0));
            Shape oshape = shape_from(out, port_of(uid, 0));
            // discard argument j behind a delete
            End jsrc = source_of(out, port_of(ccid, j));
            out.drop_wire_to(port_of(ccid, j));
            BoxId dl = out.add_box(delete_box(cc.ins[j]));
            out.connect(jsrc, port_of(dl, 0), cc.ins[j]);
            std::string fresh = collapsed_id(u.op, i, j);
            if (cc.ins.size() == 2) {
                End keep = source_of(out, port_of(ccid, i));
                out.drop_wire_to(port_of(ccid, i));
                out.drop_wire_from(port_of(ccid, 0));
                out.drop_wire_to(port_of(uid, 0));
                out.drop_wire_from(port_of(uid, 0));
                erase_box(out, ccid);
                erase_box(out, uid);
                BoxId e = out.add_box(learnable_box(fresh, {cc.ins[i]}, {u.outs[0]}));
                out.connect(keep, port_of(e, 0), cc.ins[i]);
                out.connect(port_of(e, 0), dst, oshape);
                cleanup_counit(out);
                return out;
            }
            // narrower concat without argument j
            std::vector<Shape> parts;
            std::vector<End> srcs;
            for (uint32_t p = 0; p < cc.ins.size(); ++p) {
                if (p == j) continue;
                srcs.push_back(source_of(out, port_of(ccid, p)));
                parts.push_back(cc.ins[p]);
                out.drop_wire_to(port_of(ccid, p));
            }
            out.drop_wire_from(port_of(ccid, 0));
            out.drop_wire_to(port_of(uid, 0));
            out.drop_wire_from(port_of(uid, 0));
            erase_box(out, ccid);
            erase_box(out, uid);
            Box ncc = concat_box_n(parts);
            Shape ccout = ncc.outs[0];
            BoxId nccid = out.add_box(ncc);
            BoxId e = out.add_box(learnable_box(fresh, {ccout}, {u.outs[0]}));
            for (uint32_t p = 0; p < srcs.size(); ++p) out.connect(srcs[p], port_of(nccid, p), parts[p]);
            out.connect(port_of(nccid, 0), port_of(e, 0), ccout);
            out.connect(port_of(e, 0), dst, oshape);
            cleanup_counit(out);
            return out;
        }
        BoxId uid = m.boxes.at("ua");
        const Box u = need_box(d, uid, BoxKind::Learnable, "copy-concat-collapse");
        Shape in = u.ins[0];
        Builder bl;
        Val x = bl.input(in);
        auto [a, b] = bl.copy(x);
        Val cc = bl.add1(concat_box(in, in), {a, b});
        bl.output(bl.add1(learnable_box("cax(" + u.op + ")", {cc.shape}, {u.outs[0]}), {cc}));
        return splice_replace(d, uid, bl.finish());
    }

    std::optional<ParamStore> witness(const Diagram& d, const Match& m,
                                      const ParamStore& lhs) const override {
        const Box& u = d.box(m.boxes.at("ua"));
        const Box& cc = d.box(m.boxes.at("concat"));
        uint32_t i = static_cast<uint32_t>(m.ints.at("i"));
        uint32_t j = static_cast<uint32_t>(m.ints.at("j"));
        const auto& um = lhs.at(u.op).mlp;
        if (um.layers.empty()) return std::nullopt;
        auto units = witnessutil::concat_arg_units(cc);
        if (!units) return std::nullopt;
        int64_t total_units = 0;
        for (int64_t w : *units) total_units += w;
        const auto& W1 = um.layers.front().W;
        int64_t in_w = W1.shape[1];
        if (in_w % total_units != 0) return std::nullopt;
        int64_t unit = in_w / total_units;
        std::vector<int64_t> off(units->size() + 1, 0);
        for (size_t k = 0; k < units->size(); ++k) off[k + 1] = off[k] + (*units)[k] * unit;
        int64_t wi = (*units)[i] * unit;
        // sum column block j into block i, drop block j
        MlpT<double> collapsed = um;
        int64_t out_w = W1.shape[0];
        int64_t new_in = in_w - wi;  // widths of blocks i and j agree
        TensorT<double> W({out_w, new_in});
        for (int64_t r = 0; r < out_w; ++r) {
            int64_t cnew = 0;
            for (size_t blk = 0; blk < units->size(); ++blk) {
                if (blk == j) continue;
                for (int64_t c = off[blk]; c < off[blk + 1]; ++c) {
                    double v = W1.data[static_cast<size_t>(r * in_w + c)];
                    if (blk == i) v += W1.data[static_cast<size_t>(r * in_w + off[j] + (c - off[i]))];
                    W.data[static_cast<size_t>(r * new_in + cnew)] = v;
                    ++cnew;
                }
            }
        }
        collapsed.layers.front().W = std::move(W);
        ParamStore out;
        ParamEntryT<double> ne;
        ne.kind = ParamEntryT<double>::Kind::Mlp;
        ne.mlp = std::move(collapsed);
        out.entries.emplace(collapsed_id(u.op, i, j), std::move(ne));
        return out;
    }

    static std::string collapsed_id(const std::string& ua, uint32_t i, uint32_t j) {
        return "ca" + std::to_string(i) + "," + std::to_string(j) + "(" + ua + ")";
    }
};

// A learnable box on one argument of concat+mlp is absorbed into the mlp.
class ConcatAbsorb final : public RewriteRule {
public:
    ConcatAbsorb() : RewriteRule("concat-absorb", RuleKind::Expressivity) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return "a learnable box feeding one argument of concat+mlp absorbs into the mlp";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [fid, f] : d.boxes) {
            if (f.kind != BoxKind::Learnable || f.ins.size() != 1 || f.outs.size() != 1) continue;
            const Wire* w = d.wire_from(port_of(fid, 0));
            if (!w || w->dst.boundary()) continue;
            BoxId ccid = static_cast<BoxId>(w->dst.box);
            const Box& cc = d.box(ccid);
            if (cc.kind != BoxKind::Primitive || cc.op != "concat") continue;
            End ucons = consumer_of(d, port_of(ccid, 0));
            if (ucons.boundary()) continue;
            const Box& u = d.box(static_cast<BoxId>(ucons.box));
            if (u.kind != BoxKind::Learnable || u.ins.size() != 1 || u.outs.size() != 1) continue;
            Match m;
            m.locator = "b" + std::to_string(fid);
            m.boxes["f"] = fid;
            m.boxes["concat"] = ccid;
            m.boxes["ua"] = static_cast<BoxId>(ucons.box);
            m.ints["p"] = w->dst.port;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId fid = m.boxes.at("f"), ccid = m.boxes.at("concat"), uid = m.boxes.at("ua");
        const Box f = need_box(d, fid, BoxKind::Learnable, "concat-absorb");
        const Box cc = need_box(d, ccid, BoxKind::Primitive, "concat-absorb");
        const Box u = need_box(d, uid, BoxKind::Learnable, "concat-absorb");
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        Diagram out = d;
        End dst = consumer_of(out, port_of(uid, 0));
        Shape oshape = shape_from(out, port_of(uid, 0));
        std::vector<End> srcs(cc.ins.size());
        std::vector<Shape> parts = cc.ins;
        for (uint32_t k = 0; k < cc.ins.size(); ++k) {
            srcs[k] = k == p ? source_of(out, port_of(fid, 0)) : source_of(out, port_of(ccid, k));
        }
        parts[p] = f.ins[0];
        for (uint32_t k = 0; k < cc.ins.size(); ++k) out.drop_wire_to(port_of(ccid, k));
        out.drop_wire_to(port_of(fid, 0));
        out.drop_wire_from(port_of(fid, 0));
        out.drop_wire_from(port_of(ccid, 0));
        out.drop_wire_to(port_of(uid, 0));
        out.drop_wire_from(port_of(uid, 0));
        erase_box(out, fid);
        erase_box(out, ccid);
        erase_box(out, uid);
        Box ncc = concat_box_n(parts);
        Shape ccout = ncc.outs[0];
        BoxId nccid = out.add_box(ncc);
        BoxId nuid =
            out.add_box(learnable_box(absorbed_id(f.op, u.op, p), {ccout}, {u.outs[0]}));
        for (uint32_t k = 0; k < srcs.size(); ++k) out.connect(srcs[k], port_of(nccid, k), parts[k]);
        out.connect(port_of(nccid, 0), port_of(nuid, 0), ccout);
        out.connect(port_of(nuid, 0), dst, oshape);
        return out;
    }

    std::optional<ParamStore> witness(const Diagram& d, const Match& m,
                                      const ParamStore& lhs) const override {
        const Box& f = d.box(m.boxes.at("f"));
        const Box& u = d.box(m.boxes.at("ua"));
        const Box& cc = d.box(m.boxes.at("concat"));
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        const auto& fm = lhs.at(f.op).mlp;
        const auto& um = lhs.at(u.op).mlp;
        if (um.layers.empty()) return std::nullopt;
        ParamStore out;
        ParamEntryT<double> ne;
        ne.kind = ParamEntryT<double>::Kind::Mlp;
        if (fm.layers.empty()) {
            ne.mlp = um;  // identity pre-box: parameters carry over
            out.entries.emplace(absorbed_id(f.op, u.op, p), std::move(ne));
            return out;
        }
        if (!witnessutil::standard_act_pattern(fm)) return std::nullopt;
        auto units = witnessutil::concat_arg_units(cc);
        if (!units) return std::nullopt;
        int64_t total_units = 0;
        for (int64_t w : *units) total_units += w;
        int64_t in_w = um.layers.front().W.shape[1];
        if (in_w % total_units != 0) return std::nullopt;
        int64_t unit = in_w / total_units;
        int64_t off = 0;
        for (uint32_t k = 0; k < p; ++k) off += (*units)[k] * unit;
        int64_t fw_out = fm.layers.back().W.shape[0];
        if (fw_out != (*units)[p] * unit) return std::nullopt;
        int64_t head = off, tail = in_w - off - fw_out;
        ne.mlp = witnessutil::absorb_into_block<double>(fm, um, off, head, tail);
        out.entries.emplace(absorbed_id(f.op, u.op, p), std::move(ne));
        return out;
    }

    static std::string absorbed_id(const std::string& f, const std::string& u, uint32_t p) {
        return "cb" + std::to_string(p) + "(" + f + ">" + u + ")";
    }
};

// Nested concatenations flatten (concatenation along the same axis is
// associative).
class ConcatFlatten final : public RewriteRule {
public:
    ConcatFlatten() : RewriteRule("concat-flatten", RuleKind::Semantic) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override { return "concatenation is associative"; }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [iid, inner] : d.boxes) {
            if (inner.kind != BoxKind::Primitive || inner.op != "concat") continue;
            const Wire* w = d.wire_from(port_of(iid, 0));
            if (!w || w->dst.boundary()) continue;
            const Box& outer = d.box(static_cast<BoxId>(w->dst.box));
            if (outer.kind != BoxKind::Primitive || outer.op != "concat") continue;
            Match m;
            m.locator = "b" + std::to_string(iid);
            m.boxes["inner"] = iid;
            m.boxes["outer"] = static_cast<BoxId>(w->dst.box);
            m.ints["p"] = w->dst.port;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId iid = m.boxes.at("inner"), oid = m.boxes.at("outer");
        const Box inner = need_box(d, iid, BoxKind::Primitive, "concat-flatten");
        const Box outer = need_box(d, oid, BoxKind::Primitive, "concat-flatten");
        uint32_t p = static_cast<uint32_t>(m.ints.at("p"));
        Diagram out = d;
        End dst = consumer_of(out, port_of(oid, 0));
        Shape oshape = shape_from(out, port_of(oid, 0));
        std::vector<End> srcs;
        std::vector<Shape> parts;
        for (uint32_t k = 0; k < outer.ins.size(); ++k) {
            if (k == p) {
                for (uint32_t q = 0; q < inner.ins.size(); ++q) {
                    srcs.push_back(source_of(out, port_of(iid, q)));
                    parts.push_back(inner.ins[q]);
                }
            } else {
                srcs.push_back(source_of(out, port_of(oid, k)));
                parts.push_back(outer.ins[k]);
            }
        }
        for (uint32_t k = 0; k < inner.ins.size(); ++k) out.drop_wire_to(port_of(iid, k));
        for (uint32_t k = 0; k < outer.ins.size(); ++k) out.drop_wire_to(port_of(oid, k));
        out.drop_wire_from(port_of(iid, 0));
        out.drop_wire_from(port_of(oid, 0));
        erase_box(out, iid);
        erase_box(out, oid);
        Box ncc = concat_box_n(parts);
        BoxId nid = out.add_box(ncc);
        for (uint32_t k = 0; k < srcs.size(); ++k) out.connect(srcs[k], port_of(nid, k), parts[k]);
        out.connect(port_of(nid, 0), dst, oshape);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t seed) const override {
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape SD{S, D};
        Builder bl;
        Val a = bl.input(SD);
        Val b = bl.input(SD);
        Val c = bl.input(SD);
        Val in1 = seed % 2 == 0 ? bl.add1(concat_box(SD, SD), {a, b})
                                : bl.add1(concat_box(SD, SD), {b, c});
        Val in2 = seed % 2 == 0 ? bl.add1(concat_box(in1.shape, SD), {in1, c})
                                : bl.add1(concat_box(SD, in1.shape), {a, in1});
        bl.output(in2);
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }
};

// A learnable box whose output fans out through a copy tree into learnable
// (or concat+learnable) consumers fuses into every leaf at once. One
// learnable box disappears, so the step shrinks even though leaves are
// rewritten in place.
class FuseThroughCopy final : public RewriteRule {
public:
    FuseThroughCopy() : RewriteRule("fuse-through-copy", RuleKind::Expressivity) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return "a learnable box fuses through a copy tree into all of its consumers";
    }

    struct Leaf {
        BoxId consumer;
        uint32_t port;
        bool via_concat;  // consumer is a concat feeding a learnable
        BoxId concat_ua;
    };

    static bool collect_leaves(const Diagram& d, End src, std::vector<Leaf>& leaves) {
        End dst = d.wire_from(src) ? d.wire_from(src)->dst : End{kBoundary, 0};
        if (dst.boundary()) return false;
        const Box& c = d.box(static_cast<BoxId>(dst.box));
        if (c.kind == BoxKind::Copy) {
            return collect_leaves(d, port_of(static_cast<BoxId>(dst.box), 0), leaves) &&
                   collect_leaves(d, port_of(static_cast<BoxId>(dst.box), 1), leaves);
        }
        if (c.kind == BoxKind::Learnable && c.ins.size() == 1 && c.outs.size() == 1) {
            leaves.push_back({static_cast<BoxId>(dst.box), dst.port, false, 0});
            return true;
        }
        if (c.kind == BoxKind::Primitive && c.op == "concat") {
            const Wire* w = d.wire_from(port_of(static_cast<BoxId>(dst.box), 0));
            if (!w || w->dst.boundary()) return false;
            const Box& u = d.box(static_cast<BoxId>(w->dst.box));
            if (u.kind != BoxKind::Learnable || u.ins.size() != 1 || u.outs.size() != 1)
                return false;
            leaves.push_back({static_cast<BoxId>(dst.box), dst.port, true,
                              static_cast<BoxId>(w->dst.box)});
            return true;
        }
        return false;
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [fid, f] : d.boxes) {
            if (f.kind != BoxKind::Learnable || f.ins.size() != 1 || f.outs.size() != 1) continue;
            if (!(f.ins[0] == f.outs[0])) continue;  // copy tree keeps its wire shapes
            const Wire* w = d.wire_from(port_of(fid, 0));
            if (!w || w->dst.boundary()) continue;
            const Box& c = d.box(static_cast<BoxId>(w->dst.box));
            if (c.kind != BoxKind::Copy) continue;  // direct fusion handles the rest
            std::vector<Leaf> leaves;
            if (!collect_leaves(d, port_of(fid, 0), leaves)) continue;
            Match m;
            m.locator = "b" + std::to_string(fid);
            m.boxes["f"] = fid;
            out.push_back(std::move(m));
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId fid = m.boxes.at("f");
        const Box f = need_box(d, fid, BoxKind::Learnable, "fuse-through-copy");
        std::vector<Leaf> leaves;
        if (!collect_leaves(d, port_of(fid, 0), leaves))
            throw StaleMatch("fuse-through-copy: leaves changed");
        Diagram out = d;
        // bypass f: its input value feeds the copy tree directly
        End src = source_of(out, port_of(fid, 0));
        End tree = consumer_of(out, port_of(fid, 0));
        out.drop_wire_to(port_of(fid, 0));
        out.drop_wire_from(port_of(fid, 0));
        erase_box(out, fid);
        out.connect(src, tree, f.ins[0]);
        // rewrite each leaf
        for (const auto& leaf : leaves) {
            if (!leaf.via_concat) {
                const Box g = out.box(leaf.consumer);
                Box ng = learnable_box(UaFusion::fused_id(f.op, g.op), {f.ins[0]}, {g.outs[0]});
                // same in shape symbolically: f is an endomorphism-compatible chain
                End gsrc = source_of(out, port_of(leaf.consumer, 0));
                End gdst = consumer_of(out, port_of(leaf.consumer, 0));
                Shape oshape = shape_from(out, port_of(leaf.consumer, 0));
                out.drop_wire_to(port_of(leaf.consumer, 0));
                out.drop_wire_from(port_of(leaf.consumer, 0));
                erase_box(out, leaf.consumer);
                BoxId nid = out.add_box(ng);
                out.connect(gsrc, port_of(nid, 0), f.ins[0]);
                out.connect(port_of(nid, 0), gdst, oshape);
            } else {
                // concat arg: retype the argument and absorb into the ua
                const Box cc = out.box(leaf.consumer);
                const Box u = out.box(leaf.concat_ua);
                std::vector<Shape> parts = cc.ins;
                parts[leaf.port] = f.ins[0];
                std::vector<End> srcs(cc.ins.size());
                for (uint32_t k = 0; k < cc.ins.size(); ++k)
                    srcs[k] = source_of(out, port_of(leaf.consumer, k));
                End dst = consumer_of(out, port_of(leaf.concat_ua, 0));
                Shape oshape = shape_from(out, port_of(leaf.concat_ua, 0));
                for (uint32_t k = 0; k < cc.ins.size(); ++k)
                    out.drop_wire_to(port_of(leaf.consumer, k));
                out.drop_wire_from(port_of(leaf.consumer, 0));
                out.drop_wire_to(port_of(leaf.concat_ua, 0));
                out.drop_wire_from(port_of(leaf.concat_ua, 0));
                erase_box(out, leaf.consumer);
                erase_box(out, leaf.concat_ua);
                Box ncc = concat_box_n(parts);
                Shape ccout = ncc.outs[0];
                BoxId nccid = out.add_box(ncc);
                BoxId nuid = out.add_box(learnable_box(
                    ConcatAbsorb::absorbed_id(f.op, u.op, leaf.port), {ccout}, {u.outs[0]}));
                for (uint32_t k = 0; k < srcs.size(); ++k)
                    out.connect(srcs[k], port_of(nccid, k), parts[k]);
                out.connect(port_of(nccid, 0), port_of(nuid, 0), ccout);
                out.connect(port_of(nuid, 0), dst, oshape);
            }
        }
        return out;
    }
};

// Two boxes computing the same function of the same values merge (shared
// subexpression). For learnables the ids must agree, which keeps the rule
// function-preserving.
class CseMerge final : public RewriteRule {
public:
    CseMerge() : RewriteRule("cse-merge", RuleKind::Semantic), require_same_ua_(true) {}
    explicit CseMerge(std::string nm, RuleKind kind, bool require_same_ua)
        : RewriteRule(std::move(nm), kind), require_same_ua_(require_same_ua) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    bool normalizing() const override { return true; }
    std::string describe() const override {
        return require_same_ua_ ? "merge duplicate computations of the same values"
                                : "merge parallel learnable boxes over the same values";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        std::vector<Match> out;
        for (const auto& [id1, b1] : d.boxes) {
            if (b1.kind == BoxKind::Copy || b1.kind == BoxKind::Delete) continue;
            if (b1.outs.size() != 1 || b1.ins.empty()) continue;
            for (const auto& [id2, b2] : d.boxes) {
                if (id2 <= id1) continue;
                if (b2.kind != b1.kind || b2.outs.size() != 1 || b2.ins.size() != b1.ins.size())
                    continue;
                if (require_same_ua_) {
                    if (!rules::CopyNaturality::same_function(b1, b2)) continue;
                } else {
                    if (b1.kind != BoxKind::Learnable) continue;
                    bool shapes_ok = true;
                    for (size_t i = 0; i < b1.ins.size(); ++i)
                        if (!(b1.ins[i] == b2.ins[i])) shapes_ok = false;
                    for (size_t i = 0; i < b1.outs.size(); ++i)
                        if (!(b1.outs[i] == b2.outs[i])) shapes_ok = false;
                    if (!shapes_ok) continue;
                }
                bool same_vals = true;
                for (uint32_t p = 0; p < b1.ins.size() && same_vals; ++p) {
                    End v1 = resolve_value(d, source_of(d, port_of(id1, p)));
                    End v2 = resolve_value(d, source_of(d, port_of(id2, p)));
                    if (!(v1 == v2)) same_vals = false;
                }
                if (!same_vals) continue;
                Match m;
                m.locator = "b" + std::to_string(id1) + "+b" + std::to_string(id2);
                m.boxes["a"] = id1;
                m.boxes["b"] = id2;
                out.push_back(std::move(m));
            }
        }
        return out;
    }

    Diagram apply_flat(const Diagram& d, const Match& m, Direction) const override {
        BoxId id1 = m.boxes.at("a"), id2 = m.boxes.at("b");
        if (!d.has_box(id1) || !d.has_box(id2)) throw StaleMatch(name() + ": box gone");
        const Box b2 = d.box(id2);
        Diagram out = d;
        // detach the duplicate's inputs behind deletes
        for (uint32_t p = 0; p < b2.ins.size(); ++p) {
            End src = source_of(out, port_of(id2, p));
            out.drop_wire_to(port_of(id2, p));
            BoxId dl = out.add_box(delete_box(b2.ins[p]));
            out.connect(src, port_of(dl, 0), b2.ins[p]);
        }
        End dst2 = consumer_of(out, port_of(id2, 0));
        Shape oshape = shape_from(out, port_of(id2, 0));
        out.drop_wire_from(port_of(id2, 0));
        erase_box(out, id2);
        End dst1 = consumer_of(out, port_of(id1, 0));
        out.drop_wire_from(port_of(id1, 0));
        BoxId cp = out.add_box(copy_box(oshape));
        out.connect(port_of(id1, 0), port_of(cp, 0), oshape);
        out.connect(port_of(cp, 0), dst1, oshape);
        out.connect(port_of(cp, 1), dst2, oshape);
        cleanup_counit(out);
        return out;
    }

    std::optional<RuleInstance> random_instance(uint64_t) const override {
        if (!require_same_ua_) return std::nullopt;  // the expressivity variant is not certified
        DimSym S = DimSym::seq("s"), D = DimSym::fixed("d");
        Shape SD{S, D};
        Builder bl;
        Val x = bl.input(SD);
        auto [a, b] = bl.copy(x);
        Val u = bl.add1(elementwise("phi", SD), {a});
        Val v = bl.add1(elementwise("phi", SD), {b});
        bl.output(bl.add1(add_box(SD, SD), {u, v}));
        RuleInstance inst;
        inst.diagram = bl.finish();
        auto ms = find(inst.diagram, Direction::Fwd);
        if (ms.empty()) return std::nullopt;
        inst.match = ms.front();
        return inst;
    }

private:
    bool require_same_ua_;
};

// Replay-only rewiring: the consumer of one boundary input is re-plugged
// onto a copy of another boundary input's stream; the orphaned input is
// discarded. This is the non-expressivity step of the encoder-attention
// derivation (self-attention plugs the data stream into the queries).
class RewireInput final : public RewriteRule {
public:
    RewireInput(uint32_t take_from, uint32_t orphan)
        : RewriteRule("rewire-input", RuleKind::StructuralEdit),
          take_from_(take_from),
          orphan_(orphan) {}
    bool supports(Direction dir) const override { return dir == Direction::Fwd; }
    std::string describe() const override {
        return "plug one boundary stream into the consumers of another";
    }

    std::vector<Match> find_flat(const Diagram& d, Direction) const override {
        if (take_from_ >= d.ins.size() || orphan_ >= d.ins.size()) return {};
        if (!(d.ins[take_from_] == d.ins[orphan_])) return {};
        int consumers = 0;
        for (const auto& w : d.wires)
            if (w.src.boundary() && w.src.port == orphan_) consumers++;
        if (consumers != 1) return {};
        Match m;
        m.locator = "in" + std::to_string(take_from_) + ">in" + std::to_string(orphan_);
        return {m};
    }

    Diagram apply_flat(const Diagram& d, const Match&, Direction) const override {
        Diagram out = d;
        Shape sh = d.ins[take_from_];
        End orphan_dst{kBoundary, 0};
        for (const auto& w : out.wires)
            if (w.src.boundary() && w.src.port == orphan_) orphan_dst = w.dst;
        out.drop_wire_from(End{kBoundary, orphan_});
        // tap a copy of the take_from stream
        End tf_dst{kBoundary, 0};
        for (const auto& w : out.wires)
            if (w.src.boundary() && w.src.port == take_from_) tf_dst = w.dst;
        out.drop_wire_from(End{kBoundary, take_from_});
        BoxId cp = out.add_box(copy_box(sh));
        out.connect(End{kBoundary, take_from_}, port_of(cp, 0), sh);
        out.connect(port_of(cp, 0), tf_dst, sh);
        out.connect(port_of(cp, 1), orphan_dst, sh);
        BoxId dl = out.add_box(delete_box(sh));
        out.connect(End{kBoundary, orphan_}, port_of(dl, 0), sh);
        return out;
    }

private:
    uint32_t take_from_, orphan_;
};

}  // namespace rules

// ---- the catalog ------------------------------------------------------------

inline RuleSet builtin_rules() {
    using namespace rules;
    RuleSet rs;
    auto add = [&](RewriteRule* r) { rs.rules.emplace_back(r); };
    // semantic
    add(new Tightening());
    add(new Yanking());
    add(new Strength());
    add(new Sliding(1));
    add(new Sliding(2));
    add(new Vanishing());
    add(new CopyNaturality());
    add(new BraidNaturality());
    add(new ContractAssoc());
    add(new SimdSplit());
    add(new PullConstant());
    add(new SimdHoist());
    add(new ContractSimdUnfold());
    add(new ReverseSimdCommute());
    add(new ReverseInvolution());
    add(new CseMerge());
    add(new ConcatFlatten());
    add(new FuseThroughCopy());
    // expressivity
    add(new UaSubstitute("residual", [](const Box& ua) -> std::optional<Diagram> {
        if (ua.ins.size() != 1 || ua.outs.size() != 1 || !(ua.ins[0] == ua.outs[0]))
            return std::nullopt;
        Shape sh = ua.ins[0];
        Builder bl;
        Val x = bl.input(sh);
        auto [a, b] = bl.copy(x);
        Val fx = bl.add1(learnable_box("res(" + ua.op + ")", {sh}, {sh}), {a});
        bl.output(bl.add1(add_box(sh, sh), {fx, b}));
        return bl.finish();
    }));
    add(new UaSubstitute("zero", [](const Box& ua) -> std::optional<Diagram> {
        if (ua.ins.size() != 1 || ua.outs.size() != 1) return std::nullopt;
        Builder bl;
        Val x = bl.input(ua.ins[0]);
        bl.del(x);
        bl.output(bl.add1(zeros_box(ua.outs[0]), {}));
        return bl.finish();
    }));
    add(new UaDrop());
    add(new UaFusion());
    add(new CopyConcatCollapse());
    add(new ConcatAbsorb());
    return rs;
}

}  // namespace attncalc

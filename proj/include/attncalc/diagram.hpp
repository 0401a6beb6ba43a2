// SPDX-License-Identifier: Apache-2.0
//
// The diagram IR: an open, acyclic port-graph of boxes and typed wires
// with ordered input/output boundaries.
//
// Fan-out and discard are explicit (Copy / Delete boxes); wire crossings
// are not boxes, so braid isotopy is invisible to the representation.
// A Simd box holds a nested diagram iterated in parallel over one index,
// optionally threading a residual wire through the iterates (a fold).

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "attncalc/dims.hpp"

namespace attncalc {

enum class BoxKind : uint8_t { Primitive, Learnable, Copy, Delete, Reshape, Contract, Reverse, Simd };

inline const char* box_kind_name(BoxKind k) {
    switch (k) {
        case BoxKind::Primitive: return "prim";
        case BoxKind::Learnable: return "ua";
        case BoxKind::Copy: return "copy";
        case BoxKind::Delete: return "delete";
        case BoxKind::Reshape: return "reshape";
        case BoxKind::Contract: return "contract";
        case BoxKind::Reverse: return "reverse";
        case BoxKind::Simd: return "simd";
    }
    return "?";
}

using Attr = std::variant<int64_t, double, std::string, DimSym, std::vector<int64_t>>;

struct Diagram;

struct Box {
    BoxKind kind = BoxKind::Primitive;
    std::string op;  // primitive op name, or learnable ua-id
    std::vector<Shape> ins, outs;
    std::map<std::string, Attr> attrs;
    std::shared_ptr<const Diagram> body;  // Simd only

    int64_t attr_i(const std::string& k) const { return std::get<int64_t>(attrs.at(k)); }
    double attr_f(const std::string& k) const { return std::get<double>(attrs.at(k)); }
    const std::string& attr_s(const std::string& k) const { return std::get<std::string>(attrs.at(k)); }
    const DimSym& attr_dim(const std::string& k) const { return std::get<DimSym>(attrs.at(k)); }
    const std::vector<int64_t>& attr_iv(const std::string& k) const {
        return std::get<std::vector<int64_t>>(attrs.at(k));
    }
    bool has_attr(const std::string& k) const { return attrs.count(k) > 0; }
    bool simd_residual() const { return has_attr("residual") && attr_i("residual") != 0; }
};

using BoxId = uint32_t;

// A wire endpoint. box == kBoundary refers to the diagram boundary: as a
// source it is input slot `port`, as a destination output slot `port`.
constexpr int32_t kBoundary = -1;

struct End {
    int32_t box = kBoundary;
    uint32_t port = 0;

    bool boundary() const { return box == kBoundary; }
    bool operator==(const End& o) const { return box == o.box && port == o.port; }
    bool operator<(const End& o) const { return box != o.box ? box < o.box : port < o.port; }
};

inline End bin(uint32_t slot) { return End{kBoundary, slot}; }
inline End bout(uint32_t slot) { return End{kBoundary, slot}; }
inline End port_of(BoxId b, uint32_t p) { return End{static_cast<int32_t>(b), p}; }

struct Wire {
    End src, dst;
    Shape shape;
};

struct Violation {
    std::string code;     // cycle | dangling | shape-mismatch | reshape-count | no-shared-index | ...
    std::string message;  // names the offending box / wire
};

struct TypeReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
    std::string str() const {
        std::string s;
        for (const auto& v : violations) s += v.code + ": " + v.message + "\n";
        return s;
    }
};

struct InvalidDiagram : std::runtime_error {
    explicit InvalidDiagram(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeMismatch : std::runtime_error {
    size_t position;
    ShapeMismatch(size_t pos, const std::string& what) : std::runtime_error(what), position(pos) {}
};

struct Diagram {
    std::map<BoxId, Box> boxes;
    std::vector<Wire> wires;
    std::vector<Shape> ins, outs;
    BoxId next_id = 0;

    BoxId add_box(Box b) {
        BoxId id = next_id++;
        boxes.emplace(id, std::move(b));
        return id;
    }
    void connect(End src, End dst, Shape s) { wires.push_back(Wire{src, dst, std::move(s)}); }

    const Box& box(BoxId id) const { return boxes.at(id); }
    bool has_box(BoxId id) const { return boxes.count(id) > 0; }

    const Wire* wire_from(End src) const {
        for (const auto& w : wires)
            if (w.src == src) return &w;
        return nullptr;
    }
    const Wire* wire_to(End dst) const {
        for (const auto& w : wires)
            if (w.dst == dst) return &w;
        return nullptr;
    }
    void drop_wire_from(End src) {
        wires.erase(std::remove_if(wires.begin(), wires.end(),
                                   [&](const Wire& w) { return w.src == src; }),
                    wires.end());
    }
    void drop_wire_to(End dst) {
        wires.erase(std::remove_if(wires.begin(), wires.end(),
                                   [&](const Wire& w) { return w.dst == dst; }),
                    wires.end());
    }

    // Deterministic topological order of box ids (Kahn; ready set ordered by id).
    std::vector<BoxId> topo_order() const {
        std::map<BoxId, int> indeg;
        for (const auto& [id, b] : boxes) indeg[id] = 0;
        for (const auto& w : wires)
            if (!w.src.boundary() && !w.dst.boundary()) indeg[static_cast<BoxId>(w.dst.box)]++;
        std::set<BoxId> ready;
        for (const auto& [id, d] : indeg)
            if (d == 0) ready.insert(id);
        std::vector<BoxId> order;
        while (!ready.empty()) {
            BoxId id = *ready.begin();
            ready.erase(ready.begin());
            order.push_back(id);
            for (const auto& w : wires)
                if (!w.src.boundary() && static_cast<BoxId>(w.src.box) == id && !w.dst.boundary())
                    if (--indeg[static_cast<BoxId>(w.dst.box)] == 0)
                        ready.insert(static_cast<BoxId>(w.dst.box));
        }
        return order;  // shorter than boxes.size() iff cyclic
    }

    size_t count_kind(BoxKind k) const {
        size_t n = 0;
        for (const auto& [id, b] : boxes) {
            if (b.kind == k) ++n;
            if (b.kind == BoxKind::Simd && b.body) n += b.body->count_kind(k);
        }
        return n;
    }
    size_t total_boxes() const {
        size_t n = 0;
        for (const auto& [id, b] : boxes) {
            ++n;
            if (b.kind == BoxKind::Simd && b.body) n += b.body->total_boxes();
        }
        return n;
    }
};

// ---- validation -----------------------------------------------------------

TypeReport validate(const Diagram& d);

namespace detail {

inline void check_primitive_types(const Diagram& d, BoxId id, const Box& b, TypeReport& rep);

inline void validate_into(const Diagram& d, TypeReport& rep, const std::string& ctx) {
    auto bad = [&](const std::string& code, const std::string& msg) {
        rep.violations.push_back({code, ctx.empty() ? msg : ctx + msg});
    };

    // Port coverage: each box in/out port and each boundary slot exactly once.
    std::map<std::pair<int32_t, uint32_t>, int> src_uses, dst_uses;
    for (const auto& w : d.wires) {
        src_uses[{w.src.box, w.src.port}]++;
        dst_uses[{w.dst.box, w.dst.port}]++;
    }
    for (const auto& [key, n] : src_uses)
        if (n > 1)
            bad("dangling", "multiple wires from one producer port (box " +
                                std::to_string(key.first) + "." + std::to_string(key.second) + ")");
    for (const auto& [key, n] : dst_uses)
        if (n > 1)
            bad("dangling", "multiple wires into one consumer port (box " +
                                std::to_string(key.first) + "." + std::to_string(key.second) + ")");

    for (const auto& [id, b] : d.boxes) {
        for (uint32_t p = 0; p < b.ins.size(); ++p)
            if (!dst_uses.count({static_cast<int32_t>(id), p}))
                bad("dangling", "box " + std::to_string(id) + " input port " + std::to_string(p) +
                                    " is unconnected");
        for (uint32_t p = 0; p < b.outs.size(); ++p)
            if (!src_uses.count({static_cast<int32_t>(id), p}))
                bad("dangling", "box " + std::to_string(id) + " output port " + std::to_string(p) +
                                    " is unconnected");
    }
    for (uint32_t s = 0; s < d.ins.size(); ++s)
        if (!src_uses.count({kBoundary, s}))
            bad("dangling", "boundary input " + std::to_string(s) + " is unconnected");
    for (uint32_t s = 0; s < d.outs.size(); ++s)
        if (!dst_uses.count({kBoundary, s}))
            bad("dangling", "boundary output " + std::to_string(s) + " is unconnected");

    // Wires reference real ports and agree on shapes at both ends.
    for (const auto& w : d.wires) {
        Shape src_shape, dst_shape;
        bool src_ok = true, dst_ok = true;
        if (w.src.boundary()) {
            if (w.src.port >= d.ins.size()) {
                bad("dangling", "wire from nonexistent boundary input " + std::to_string(w.src.port));
                src_ok = false;
            } else
                src_shape = d.ins[w.src.port];
        } else {
            auto it = d.boxes.find(static_cast<BoxId>(w.src.box));
            if (it == d.boxes.end() || w.src.port >= it->second.outs.size()) {
                bad("dangling", "wire from nonexistent port " + std::to_string(w.src.box) + "." +
                                    std::to_string(w.src.port));
                src_ok = false;
            } else
                src_shape = it->second.outs[w.src.port];
        }
        if (w.dst.boundary()) {
            if (w.dst.port >= d.outs.size()) {
                bad("dangling", "wire into nonexistent boundary output " + std::to_string(w.dst.port));
                dst_ok = false;
            } else
                dst_shape = d.outs[w.dst.port];
        } else {
            auto it = d.boxes.find(static_cast<BoxId>(w.dst.box));
            if (it == d.boxes.end() || w.dst.port >= it->second.ins.size()) {
                bad("dangling", "wire into nonexistent port " + std::to_string(w.dst.box) + "." +
                                    std::to_string(w.dst.port));
                dst_ok = false;
            } else
                dst_shape = it->second.ins[w.dst.port];
        }
        if (src_ok && !(src_shape == w.shape))
            bad("shape-mismatch", "wire shape " + w.shape.str() + " disagrees with producer " +
                                      src_shape.str());
        if (dst_ok && !(dst_shape == w.shape))
            bad("shape-mismatch", "wire shape " + w.shape.str() + " disagrees with consumer " +
                                      dst_shape.str());
    }

    // Cycles.
    if (d.topo_order().size() != d.boxes.size()) bad("cycle", "diagram contains a cycle");

    // Per-box structural typing.
    for (const auto& [id, b] : d.boxes) {
        switch (b.kind) {
            case BoxKind::Copy:
                if (b.ins.size() != 1 || b.outs.size() != 2 || !(b.ins[0] == b.outs[0]) ||
                    !(b.ins[0] == b.outs[1]))
                    bad("shape-mismatch", "copy box " + std::to_string(id) + " is not A -> A x A");
                break;
            case BoxKind::Delete:
                if (b.ins.size() != 1 || !b.outs.empty())
                    bad("shape-mismatch", "delete box " + std::to_string(id) + " is not A -> ()");
                break;
            case BoxKind::Reshape: {
                if (b.ins.size() != 1 || b.outs.size() != 1) {
                    bad("shape-mismatch", "reshape box " + std::to_string(id) + " is not unary");
                    break;
                }
                if (!same_element_count(b.ins[0], b.outs[0]))
                    bad("reshape-count", "reshape box " + std::to_string(id) + ": " + b.ins[0].str() +
                                             " -> " + b.outs[0].str() +
                                             " does not preserve element count");
                if (b.has_attr("perm")) {
                    auto perm = b.attr_iv("perm");
                    if (perm.size() != b.ins[0].rank())
                        bad("reshape-count", "reshape box " + std::to_string(id) + " perm rank mismatch");
                }
                break;
            }
            case BoxKind::Contract: {
                if (b.ins.size() != 2 || b.outs.size() != 1) {
                    bad("shape-mismatch", "contract box " + std::to_string(id) + " is not binary");
                    break;
                }
                if (!b.has_attr("lpos") || !b.has_attr("rpos")) {
                    bad("no-shared-index", "contract box " + std::to_string(id) +
                                               " names no contraction axes");
                    break;
                }
                int64_t lpi = b.attr_i("lpos"), rpi = b.attr_i("rpos");
                if ((lpi < 0) != (rpi < 0)) {
                    bad("no-shared-index", "contract box " + std::to_string(id) +
                                               " must drop an axis from both operands or neither");
                    break;
                }
                if (lpi < 0) {
                    // degenerate contraction along no axes: tensor product
                    // (scalar multiplication at rank 0)
                    Shape expect = b.ins[0].concat(b.ins[1]);
                    if (!(expect == b.outs[0]))
                        bad("shape-mismatch", "contract box " + std::to_string(id) +
                                                  " output should be " + expect.str());
                    break;
                }
                size_t lp = static_cast<size_t>(lpi);
                size_t rp = static_cast<size_t>(rpi);
                if (lp >= b.ins[0].rank() || rp >= b.ins[1].rank()) {
                    bad("no-shared-index", "contract box " + std::to_string(id) + " axis out of range");
                    break;
                }
                if (!b.ins[0].dims[lp].same_symbol(b.ins[1].dims[rp]))
                    bad("no-shared-index", "contract box " + std::to_string(id) +
                                               " has no shared contraction index: " +
                                               b.ins[0].dims[lp].str() + " vs " + b.ins[1].dims[rp].str());
                Shape expect = b.ins[0].drop(lp).concat(b.ins[1].drop(rp));
                if (!(expect == b.outs[0]))
                    bad("shape-mismatch", "contract box " + std::to_string(id) + " output should be " +
                                              expect.str());
                break;
            }
            case BoxKind::Reverse: {
                if (b.ins.size() != 1 || b.outs.size() != 1 || !(b.ins[0] == b.outs[0]))
                    bad("shape-mismatch", "reverse box " + std::to_string(id) + " must preserve shape");
                else if (!b.has_attr("axis") ||
                         static_cast<size_t>(b.attr_i("axis")) >= b.ins[0].rank())
                    bad("shape-mismatch", "reverse box " + std::to_string(id) + " axis out of range");
                break;
            }
            case BoxKind::Simd: {
                if (!b.body) {
                    bad("dangling", "simd box " + std::to_string(id) + " has no body");
                    break;
                }
                const Diagram& body = *b.body;
                DimSym idx = b.attr_dim("index");
                bool res = b.simd_residual();
                if (body.ins.size() != b.ins.size() || body.outs.size() != b.outs.size()) {
                    bad("shape-mismatch", "simd box " + std::to_string(id) + " arity mismatch with body");
                    break;
                }
                if (res && (body.ins.empty() || body.outs.empty() || !(body.ins[0] == body.outs[0])))
                    bad("shape-mismatch", "simd box " + std::to_string(id) +
                                              " residual must be first input and first output");
                for (size_t p = 0; p < body.ins.size(); ++p) {
                    Shape want = (res && p == 0) ? body.ins[p] : body.ins[p].prepend(idx);
                    if (!(b.ins[p] == want))
                        bad("shape-mismatch", "simd box " + std::to_string(id) + " input " +
                                                  std::to_string(p) + " should be " + want.str());
                }
                for (size_t p = 0; p < body.outs.size(); ++p) {
                    Shape want = (res && p == 0) ? body.outs[p] : body.outs[p].prepend(idx);
                    if (!(b.outs[p] == want))
                        bad("shape-mismatch", "simd box " + std::to_string(id) + " output " +
                                                  std::to_string(p) + " should be " + want.str());
                }
                TypeReport inner;
                validate_into(body, inner, ctx + "simd " + std::to_string(id) + "/");
                for (auto& v : inner.violations) rep.violations.push_back(std::move(v));
                break;
            }
            case BoxKind::Primitive:
                check_primitive_types(d, id, b, rep);
                break;
            case BoxKind::Learnable:
                if (b.outs.empty())
                    bad("shape-mismatch", "learnable box " + std::to_string(id) + " has no outputs");
                break;
        }
    }
}

}  // namespace detail

inline TypeReport validate(const Diagram& d) {
    TypeReport rep;
    detail::validate_into(d, rep, "");
    return rep;
}

inline void require_valid(const Diagram& d, const std::string& what = "diagram") {
    TypeReport rep = validate(d);
    if (!rep.ok()) throw InvalidDiagram(what + " is invalid:\n" + rep.str());
}

// ---- composition ----------------------------------------------------------

// Splice d2 after d1: boundary outputs of d1 feed boundary inputs of d2.
inline Diagram compose_seq(const Diagram& d1, const Diagram& d2) {
    if (d1.outs.size() != d2.ins.size())
        throw ShapeMismatch(std::min(d1.outs.size(), d2.ins.size()),
                            "sequential composition arity mismatch: " + std::to_string(d1.outs.size()) +
                                " outputs vs " + std::to_string(d2.ins.size()) + " inputs");
    for (size_t i = 0; i < d1.outs.size(); ++i)
        if (!(d1.outs[i] == d2.ins[i]))
            throw ShapeMismatch(i, "sequential composition shape mismatch at position " +
                                       std::to_string(i) + ": " + d1.outs[i].str() + " vs " +
                                       d2.ins[i].str());

    Diagram out;
    out.ins = d1.ins;
    out.outs = d2.outs;
    std::map<BoxId, BoxId> m1, m2;
    for (const auto& [id, b] : d1.boxes) m1[id] = out.add_box(b);
    for (const auto& [id, b] : d2.boxes) m2[id] = out.add_box(b);

    auto remap = [](const std::map<BoxId, BoxId>& m, End e) {
        if (e.boundary()) return e;
        return End{static_cast<int32_t>(m.at(static_cast<BoxId>(e.box))), e.port};
    };

    // Producer feeding each d1 boundary output, consumer of each d2 boundary input.
    std::vector<End> d1_out_src(d1.outs.size());
    std::vector<Shape> mid(d1.outs.size());
    for (const auto& w : d1.wires) {
        if (w.dst.boundary()) {
            d1_out_src[w.dst.port] = remap(m1, w.src);
            mid[w.dst.port] = w.shape;
        } else
            out.connect(remap(m1, w.src), remap(m1, w.dst), w.shape);
    }
    for (const auto& w : d2.wires) {
        if (w.src.boundary()) {
            End src = d1_out_src[w.src.port];
            out.connect(src, remap(m2, w.dst), w.dst.boundary() ? mid[w.src.port] : w.shape);
        } else
            out.connect(remap(m2, w.src), remap(m2, w.dst), w.shape);
    }
    return out;
}

// Disjoint union with concatenated boundaries.
inline Diagram compose_par(const Diagram& d1, const Diagram& d2) {
    Diagram out;
    out.ins = d1.ins;
    out.ins.insert(out.ins.end(), d2.ins.begin(), d2.ins.end());
    out.outs = d1.outs;
    out.outs.insert(out.outs.end(), d2.outs.begin(), d2.outs.end());
    std::map<BoxId, BoxId> m1, m2;
    for (const auto& [id, b] : d1.boxes) m1[id] = out.add_box(b);
    for (const auto& [id, b] : d2.boxes) m2[id] = out.add_box(b);
    auto remap = [](const std::map<BoxId, BoxId>& m, End e, uint32_t in_off, uint32_t out_off,
                    bool is_src) {
        if (e.boundary()) return End{kBoundary, e.port + (is_src ? in_off : out_off)};
        return End{static_cast<int32_t>(m.at(static_cast<BoxId>(e.box))), e.port};
    };
    for (const auto& w : d1.wires)
        out.connect(remap(m1, w.src, 0, 0, true), remap(m1, w.dst, 0, 0, false), w.shape);
    uint32_t ioff = static_cast<uint32_t>(d1.ins.size());
    uint32_t ooff = static_cast<uint32_t>(d1.outs.size());
    for (const auto& w : d2.wires)
        out.connect(remap(m2, w.src, ioff, ooff, true), remap(m2, w.dst, ioff, ooff, false), w.shape);
    return out;
}

// ---- structural builders ----------------------------------------------------

inline Diagram identity(std::vector<Shape> shapes) {
    Diagram d;
    d.ins = shapes;
    d.outs = shapes;
    for (uint32_t i = 0; i < shapes.size(); ++i) d.connect(bin(i), bout(i), shapes[i]);
    return d;
}

inline Diagram empty_diagram() { return Diagram{}; }

// Swap is boxless: crossing wires.
inline Diagram swap_diagram(const Shape& a, const Shape& b) {
    Diagram d;
    d.ins = {a, b};
    d.outs = {b, a};
    d.connect(bin(0), bout(1), a);
    d.connect(bin(1), bout(0), b);
    return d;
}

struct ResidualMismatch : std::runtime_error {
    explicit ResidualMismatch(const std::string& what) : std::runtime_error(what) {}
};

inline Box make_simd_box(std::shared_ptr<const Diagram> body, const DimSym& index,
                         bool residual) {
    if (residual) {
        if (body->ins.empty() || body->outs.empty() || !(body->ins[0] == body->outs[0]))
            throw ResidualMismatch(
                "residual iteration requires the body's first input and first output to agree");
    }
    Box b;
    b.kind = BoxKind::Simd;
    b.op = "simd";
    b.body = std::move(body);
    b.attrs["index"] = index;
    if (residual) b.attrs["residual"] = int64_t{1};
    for (size_t p = 0; p < b.body->ins.size(); ++p)
        b.ins.push_back((residual && p == 0) ? b.body->ins[p] : b.body->ins[p].prepend(index));
    for (size_t p = 0; p < b.body->outs.size(); ++p)
        b.outs.push_back((residual && p == 0) ? b.body->outs[p] : b.body->outs[p].prepend(index));
    return b;
}

// Single-box diagram wrapping any box.
inline Diagram box_diagram(Box b) {
    Diagram d;
    d.ins = b.ins;
    d.outs = b.outs;
    std::vector<Shape> ins = b.ins, outs = b.outs;
    BoxId id = d.add_box(std::move(b));
    for (uint32_t p = 0; p < ins.size(); ++p) d.connect(bin(p), port_of(id, p), ins[p]);
    for (uint32_t p = 0; p < outs.size(); ++p) d.connect(port_of(id, p), bout(p), outs[p]);
    return d;
}

inline Diagram make_simd(const Diagram& body, const DimSym& index,
                         std::optional<Shape> residual = std::nullopt) {
    if (residual) {
        if (body.ins.empty() || !(body.ins[0] == *residual))
            throw ResidualMismatch("body's first input does not carry the residual shape " +
                                   residual->str());
        if (body.outs.empty() || !(body.outs[0] == *residual))
            throw ResidualMismatch("body's first output does not carry the residual shape " +
                                   residual->str());
    }
    return box_diagram(make_simd_box(std::make_shared<Diagram>(body), index, residual.has_value()));
}

struct NoSharedIndex : std::runtime_error {
    explicit NoSharedIndex(const std::string& what) : std::runtime_error(what) {}
};
struct ReshapeCountMismatch : std::runtime_error {
    explicit ReshapeCountMismatch(const std::string& what) : std::runtime_error(what) {}
};

inline Box copy_box(const Shape& s) {
    Box b;
    b.kind = BoxKind::Copy;
    b.op = "copy";
    b.ins = {s};
    b.outs = {s, s};
    return b;
}
inline Box delete_box(const Shape& s) {
    Box b;
    b.kind = BoxKind::Delete;
    b.op = "delete";
    b.ins = {s};
    return b;
}
inline Box reverse_box(const Shape& s, size_t axis) {
    Box b;
    b.kind = BoxKind::Reverse;
    b.op = "reverse";
    b.ins = {s};
    b.outs = {s};
    b.attrs["axis"] = static_cast<int64_t>(axis);
    return b;
}
// perm: order in which input axes are read before row-major reinterpretation
// into `out` (identity perm = plain reinterpret).
inline Box reshape_box(const Shape& in, const Shape& out, std::vector<int64_t> perm = {}) {
    if (!same_element_count(in, out))
        throw ReshapeCountMismatch("reshape " + in.str() + " -> " + out.str() +
                                   " does not preserve element count");
    Box b;
    b.kind = BoxKind::Reshape;
    b.op = "reshape";
    b.ins = {in};
    b.outs = {out};
    if (perm.empty()) {
        perm.resize(in.rank());
        for (size_t i = 0; i < in.rank(); ++i) perm[i] = static_cast<int64_t>(i);
    }
    b.attrs["perm"] = std::move(perm);
    return b;
}

// Contraction along no axes: the tensor product (scalar multiplication at
// rank 0, scaling for rank 0 x rank n).
inline Box outer_box(const Shape& a, const Shape& b) {
    Box box;
    box.kind = BoxKind::Contract;
    box.op = "contract";
    box.ins = {a, b};
    box.outs = {a.concat(b)};
    box.attrs["lpos"] = int64_t{-1};
    box.attrs["rpos"] = int64_t{-1};
    return box;
}

// Contract one shared axis. When lpos/rpos are not given, the unique shared
// symbol is located automatically; ambiguity or absence is an error.
inline Box contract_box(const Shape& a, const Shape& b, std::optional<size_t> lpos = std::nullopt,
                        std::optional<size_t> rpos = std::nullopt) {
    if ((!lpos || !rpos) && a.scalar() && b.scalar()) return outer_box(a, b);
    if (!lpos || !rpos) {
        std::vector<std::pair<size_t, size_t>> candidates;
        for (size_t i = 0; i < a.rank(); ++i)
            for (size_t j = 0; j < b.rank(); ++j)
                if (a.dims[i].same_symbol(b.dims[j]) &&
                    (a.dims[i].role.empty() || b.dims[j].role.empty() ||
                     a.dims[i].role == b.dims[j].role))
                    candidates.push_back({i, j});
        if (candidates.empty())
            throw NoSharedIndex("no shared contraction index between " + a.str() + " and " + b.str());
        if (candidates.size() > 1)
            throw NoSharedIndex("ambiguous contraction between " + a.str() + " and " + b.str() +
                                "; name the axes explicitly");
        lpos = candidates[0].first;
        rpos = candidates[0].second;
    }
    if (*lpos >= a.rank() || *rpos >= b.rank() || !a.dims[*lpos].same_symbol(b.dims[*rpos]))
        throw NoSharedIndex("no shared contraction index between " + a.str() + " and " + b.str());
    Box box;
    box.kind = BoxKind::Contract;
    box.op = "contract";
    box.ins = {a, b};
    box.outs = {a.drop(*lpos).concat(b.drop(*rpos))};
    box.attrs["lpos"] = static_cast<int64_t>(*lpos);
    box.attrs["rpos"] = static_cast<int64_t>(*rpos);
    return box;
}

enum class StructuralKind { Copy, Delete, Swap, Reverse, Reshape, Contract, Ones };

// ---- incremental graph builder ---------------------------------------------
// Convenience layer for assembling larger diagrams. A Val names a producer
// port together with its shape.

struct Val {
    End src;
    Shape shape;
};

class Builder {
public:
    Val input(const Shape& s) {
        d_.ins.push_back(s);
        return Val{bin(static_cast<uint32_t>(d_.ins.size() - 1)), s};
    }
    // Adds a box, wiring the given values to its input ports in order.
    std::vector<Val> add(Box b, const std::vector<Val>& args) {
        if (args.size() != b.ins.size())
            throw std::invalid_argument("builder: arity mismatch for box " + b.op);
        for (size_t i = 0; i < args.size(); ++i)
            if (!(args[i].shape == b.ins[i]))
                throw std::invalid_argument("builder: shape mismatch on " + b.op + " port " +
                                            std::to_string(i) + ": " + args[i].shape.str() + " vs " +
                                            b.ins[i].str());
        std::vector<Shape> outs = b.outs;
        BoxId id = d_.add_box(std::move(b));
        for (uint32_t p = 0; p < args.size(); ++p)
            d_.connect(args[p].src, port_of(id, p), args[p].shape);
        std::vector<Val> res;
        for (uint32_t p = 0; p < outs.size(); ++p) res.push_back(Val{port_of(id, p), outs[p]});
        return res;
    }
    Val add1(Box b, const std::vector<Val>& args) {
        auto r = add(std::move(b), args);
        if (r.size() != 1) throw std::logic_error("builder: add1 on box with out-arity != 1");
        return r[0];
    }
    std::pair<Val, Val> copy(const Val& v) {
        auto r = add(copy_box(v.shape), {v});
        return {r[0], r[1]};
    }
    // n >= 1 copies via a left comb of Copy boxes.
    std::vector<Val> copies(const Val& v, size_t n) {
        std::vector<Val> out;
        Val cur = v;
        for (size_t i = 0; i + 1 < n; ++i) {
            auto [a, b] = copy(cur);
            out.push_back(a);
            cur = b;
        }
        out.push_back(cur);
        return out;
    }
    void del(const Val& v) { add(delete_box(v.shape), {v}); }
    void output(const Val& v) {
        d_.outs.push_back(v.shape);
        d_.connect(v.src, bout(static_cast<uint32_t>(d_.outs.size() - 1)), v.shape);
    }
    Diagram finish() { return std::move(d_); }
    Diagram& raw() { return d_; }

private:
    Diagram d_;
};

}  // namespace attncalc

#include "attncalc/ops.hpp"

namespace attncalc::detail {

inline void check_primitive_types(const Diagram& d, BoxId id, const Box& b, TypeReport& rep) {
    (void)d;
    std::string err = check_primitive(b);
    if (!err.empty())
        rep.violations.push_back({"shape-mismatch", "box " + std::to_string(id) + " (" + b.op + "): " + err});
}

}  // namespace attncalc::detail

// SPDX-License-Identifier: Apache-2.0
//
// Canonical byte encoding of diagrams, invariant under box relabeling,
// interchange, wire crossings, copy/delete comonoid laws and shared
// common subterms. Two diagrams differing only by such isotopies yield
// identical codes; injectivity on larger diagrams is a tested property.
//
// Pipeline: (1) collapse the port graph to a value graph -- Copy boxes are
// transparent, boxes computing the same function of the same values are
// merged, Reverse/Reverse and invertible Reshape chains are erased;
// (2) colour nodes by iterated neighbourhood refinement anchored at the
// ordered boundary; (3) if colours tie, individualise and take the
// lexicographically least serialization.

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attncalc/diagram.hpp"
#include "attncalc/rng.hpp"

namespace attncalc {

using CanonicalCode = std::string;

inline CanonicalCode canonicalize(const Diagram& d);

namespace canon {

struct Ref {
    int node = -1;  // -1: boundary input `port`
    int port = 0;
    bool operator==(const Ref& o) const { return node == o.node && port == o.port; }
};

struct Node {
    std::string key;  // structural identity, ua-id excluded
    std::string ua;   // learnable id (merge identity only)
    std::vector<Ref> ins;
    int nouts = 1;
};

struct ValueGraph {
    std::vector<Node> nodes;
    std::vector<Ref> outs;
    std::vector<Shape> in_shapes, out_shapes;
    // values that are only ever deleted
    std::vector<Ref> deleted;
};

inline std::string attr_str(const Attr& a) {
    struct V {
        std::string operator()(int64_t v) const { return "i" + std::to_string(v); }
        std::string operator()(double v) const {
            std::ostringstream os;
            os << "f" << v;
            return os.str();
        }
        std::string operator()(const std::string& v) const { return "s" + v; }
        std::string operator()(const DimSym& v) const { return "d" + v.key(); }
        std::string operator()(const std::vector<int64_t>& v) const {
            std::string s = "v";
            for (auto x : v) s += std::to_string(x) + ",";
            return s;
        }
    };
    return std::visit(V{}, a);
}

inline bool attrs_equal(const std::map<std::string, Attr>& a, const std::map<std::string, Attr>& b) {
    if (a.size() != b.size()) return false;
    auto ita = a.begin();
    auto itb = b.begin();
    for (; ita != a.end(); ++ita, ++itb)
        if (ita->first != itb->first || attr_str(ita->second) != attr_str(itb->second)) return false;
    return true;
}

inline std::string box_key(const Box& b);

inline std::string shapes_key(const std::vector<Shape>& ss) {
    std::string s;
    for (const auto& sh : ss) s += sh.key();
    return s;
}

inline bool identity_perm(const std::vector<int64_t>& p) {
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] != static_cast<int64_t>(i)) return false;
    return true;
}

// A reshape whose row-major reinterpretation is trivial: the output dims
// are exactly the permuted input dims.
inline bool pure_transpose(const Shape& in, const Shape& out, const std::vector<int64_t>& p) {
    if (in.rank() != out.rank() || p.size() != in.rank()) return false;
    for (size_t k = 0; k < p.size(); ++k)
        if (!out.dims[k].same_symbol(in.dims[static_cast<size_t>(p[k])])) return false;
    return true;
}

inline std::string reshape_key(const Shape& in, const Shape& out, const std::vector<int64_t>& perm) {
    std::string permstr = "id";
    if (!identity_perm(perm)) {
        permstr.clear();
        for (auto x : perm) permstr += std::to_string(x) + ",";
    }
    return std::string("reshape\x02") + in.key() + "\x03" + out.key() + "\x03" + permstr;
}

inline ValueGraph build_value_graph(const Diagram& d) {
    ValueGraph g;
    g.in_shapes = d.ins;
    g.out_shapes = d.outs;

    std::map<std::pair<int32_t, uint32_t>, Ref> value;  // producer port -> value
    for (const auto& w : d.wires)
        if (w.src.boundary()) value[{kBoundary, w.src.port}] = Ref{-1, static_cast<int>(w.src.port)};

    auto resolve = [&](End e) -> Ref {
        auto it = value.find({e.box, e.port});
        if (it == value.end()) throw InvalidDiagram("canonicalize: unresolved wire source");
        return it->second;
    };
    auto input_of = [&](BoxId id, uint32_t port) -> Ref {
        const Wire* w = d.wire_to(port_of(id, port));
        if (!w) throw InvalidDiagram("canonicalize: missing input wire");
        return resolve(w->src);
    };

    std::map<std::string, int> interned;
    std::vector<Ref> delete_targets;
    struct RInfo {
        Shape in, out;
        std::vector<int64_t> perm;
    };
    std::map<int, RInfo> rinfo;  // reshape node index -> its parameters

    auto intern = [&](const std::string& key, const std::string& ua, std::vector<Ref> ins,
                      int nouts) -> int {
        std::string mk = key + "\x01" + ua + "\x01";
        for (const auto& r : ins) mk += std::to_string(r.node) + "." + std::to_string(r.port) + ";";
        auto it = interned.find(mk);
        if (it != interned.end()) return it->second;
        int idx = static_cast<int>(g.nodes.size());
        g.nodes.push_back(Node{key, ua, std::move(ins), nouts});
        interned.emplace(mk, idx);
        return idx;
    };

    auto intern_reshape = [&](const Shape& in, const Shape& out, std::vector<int64_t> perm,
                              Ref src) -> Ref {
        if (identity_perm(perm) && in == out) return src;  // nothing to do
        int idx = intern(reshape_key(in, out, perm), "", {src}, 1);
        rinfo[idx] = RInfo{in, out, std::move(perm)};
        return Ref{idx, 0};
    };

    for (BoxId id : d.topo_order()) {
        const Box& b = d.box(id);
        std::vector<Ref> ins;
        for (uint32_t p = 0; p < b.ins.size(); ++p) ins.push_back(input_of(id, p));

        switch (b.kind) {
            case BoxKind::Copy:
                value[{static_cast<int32_t>(id), 0}] = ins[0];
                value[{static_cast<int32_t>(id), 1}] = ins[0];
                continue;
            case BoxKind::Delete:
                delete_targets.push_back(ins[0]);
                continue;
            case BoxKind::Reverse: {
                Ref r = ins[0];
                if (r.node >= 0) {
                    const Node& n = g.nodes[static_cast<size_t>(r.node)];
                    if (n.key == box_key(b) && n.ins.size() == 1) {
                        // reverse of reverse along the same axis: erase both
                        value[{static_cast<int32_t>(id), 0}] = n.ins[0];
                        continue;
                    }
                }
                value[{static_cast<int32_t>(id), 0}] = Ref{intern(box_key(b), "", ins, 1), 0};
                continue;
            }
            case BoxKind::Reshape: {
                Ref r = ins[0];
                std::vector<int64_t> perm =
                    b.has_attr("perm") ? b.attr_iv("perm") : std::vector<int64_t>{};
                if (perm.empty())
                    for (size_t k = 0; k < b.ins[0].rank(); ++k) perm.push_back(static_cast<int64_t>(k));
                Shape in = b.ins[0], out = b.outs[0];
                if (r.node >= 0 && rinfo.count(r.node)) {
                    const RInfo& inner = rinfo[r.node];
                    Ref base = g.nodes[static_cast<size_t>(r.node)].ins[0];
                    if (identity_perm(perm)) {
                        // pure reinterpretation folds into whatever came before
                        value[{static_cast<int32_t>(id), 0}] =
                            intern_reshape(inner.in, out, inner.perm, base);
                        continue;
                    }
                    if (pure_transpose(inner.in, inner.out, inner.perm) &&
                        pure_transpose(in, out, perm)) {
                        std::vector<int64_t> comp(perm.size());
                        for (size_t k = 0; k < perm.size(); ++k)
                            comp[k] = inner.perm[static_cast<size_t>(perm[k])];
                        value[{static_cast<int32_t>(id), 0}] =
                            intern_reshape(inner.in, out, std::move(comp), base);
                        continue;
                    }
                }
                value[{static_cast<int32_t>(id), 0}] = intern_reshape(in, out, std::move(perm), r);
                continue;
            }
            default: {
                std::string ua = b.kind == BoxKind::Learnable ? b.op : "";
                int idx = intern(box_key(b), ua, ins, static_cast<int>(b.outs.size()));
                for (uint32_t p = 0; p < b.outs.size(); ++p)
                    value[{static_cast<int32_t>(id), p}] = Ref{idx, static_cast<int>(p)};
            }
        }
    }

    for (const auto& w : d.wires)
        if (w.dst.boundary()) {
            if (g.outs.size() <= w.dst.port) g.outs.resize(w.dst.port + 1);
            g.outs[w.dst.port] = resolve(w.src);
        }

    // Sweep nodes orphaned by the peephole rewiring (reshape folds, double
    // reverses). In a valid diagram every surving value is reachable from an
    // output or a delete.
    std::vector<bool> live(g.nodes.size(), false);
    std::vector<int> stack;
    auto mark = [&](const Ref& r) {
        if (r.node >= 0 && !live[static_cast<size_t>(r.node)]) {
            live[static_cast<size_t>(r.node)] = true;
            stack.push_back(r.node);
        }
    };
    for (const auto& r : g.outs) mark(r);
    for (const auto& r : delete_targets) mark(r);
    while (!stack.empty()) {
        int n = stack.back();
        stack.pop_back();
        for (const auto& r : g.nodes[static_cast<size_t>(n)].ins) mark(r);
    }
    std::vector<int> remap(g.nodes.size(), -1);
    std::vector<Node> compact;
    for (size_t i = 0; i < g.nodes.size(); ++i)
        if (live[i]) {
            remap[i] = static_cast<int>(compact.size());
            compact.push_back(std::move(g.nodes[i]));
        }
    for (auto& n : compact)
        for (auto& r : n.ins)
            if (r.node >= 0) r.node = remap[static_cast<size_t>(r.node)];
    for (auto& r : g.outs)
        if (r.node >= 0) r.node = remap[static_cast<size_t>(r.node)];
    for (auto& r : delete_targets)
        if (r.node >= 0) r.node = remap[static_cast<size_t>(r.node)];
    g.nodes = std::move(compact);

    // Counit law: a deleted value with another consumer is simply that value.
    std::set<std::pair<int, int>> consumed;
    for (const auto& n : g.nodes)
        for (const auto& r : n.ins) consumed.insert({r.node, r.port});
    for (const auto& r : g.outs) consumed.insert({r.node, r.port});
    std::set<std::pair<int, int>> dels;
    for (const auto& r : delete_targets)
        if (!consumed.count({r.node, r.port})) dels.insert({r.node, r.port});
    for (const auto& [n, p] : dels) g.deleted.push_back(Ref{n, p});
    return g;
}

inline std::string box_key(const Box& b) {
    std::string key;
    switch (b.kind) {
        case BoxKind::Primitive:
            key = "prim\x02" + b.op;
            break;
        case BoxKind::Learnable:
            key = "ua\x02";  // identity of the ua is handled via alpha indices
            break;
        case BoxKind::Reshape: {
            std::vector<int64_t> perm =
                b.has_attr("perm") ? b.attr_iv("perm") : std::vector<int64_t>{};
            if (perm.empty())
                for (size_t k = 0; k < b.ins[0].rank(); ++k) perm.push_back(static_cast<int64_t>(k));
            return reshape_key(b.ins[0], b.outs[0], perm);
        }
        case BoxKind::Contract:
            key = "contract\x02";
            break;
        case BoxKind::Reverse:
            key = "reverse\x02";
            break;
        case BoxKind::Simd:
            key = "simd\x02" + canonicalize(*b.body);
            break;
        case BoxKind::Copy:
        case BoxKind::Delete:
            key = std::string(box_kind_name(b.kind)) + "\x02";
            break;
    }
    for (const auto& [k, v] : b.attrs) {
        if (k == "perm") continue;
        key += "\x03" + k + "=" + attr_str(v);
    }
    key += "\x04" + shapes_key(b.ins) + "\x05" + shapes_key(b.outs);
    return key;
}

// ---- canonical ordering ----------------------------------------------------

struct Colouring {
    std::vector<uint64_t> colour;

    bool all_distinct() const {
        std::set<uint64_t> s(colour.begin(), colour.end());
        return s.size() == colour.size();
    }
};

inline uint64_t h_mix(uint64_t a, uint64_t b) { return splitmix64(a ^ (b + 0x9E3779B97F4A7C15ull)); }

inline Colouring refine(const ValueGraph& g, std::vector<uint64_t> colour) {
    size_t n = g.nodes.size();
    // consumer lists per (node, port)
    std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> consumers;  // -> (consumer node, in-slot)
    for (size_t i = 0; i < n; ++i)
        for (size_t s = 0; s < g.nodes[i].ins.size(); ++s) {
            const Ref& r = g.nodes[i].ins[s];
            consumers[{r.node, r.port}].push_back({static_cast<int>(i), static_cast<int>(s)});
        }

    for (size_t round = 0; round < n + 2; ++round) {
        std::vector<uint64_t> next(n);
        for (size_t i = 0; i < n; ++i) {
            uint64_t h = h_mix(0x517CC1B727220A95ull, colour[i]);
            for (const auto& r : g.nodes[i].ins) {
                uint64_t cin = r.node < 0
                                   ? h_mix(0xB1A2C3D4E5F60718ull, static_cast<uint64_t>(r.port))
                                   : h_mix(colour[static_cast<size_t>(r.node)],
                                           static_cast<uint64_t>(r.port));
                h = h_mix(h, cin);
            }
            for (int p = 0; p < g.nodes[i].nouts; ++p) {
                std::vector<uint64_t> cs;
                auto it = consumers.find({static_cast<int>(i), p});
                if (it != consumers.end())
                    for (const auto& [cn, slot] : it->second)
                        cs.push_back(h_mix(colour[static_cast<size_t>(cn)],
                                           static_cast<uint64_t>(slot)));
                for (size_t oi = 0; oi < g.outs.size(); ++oi)
                    if (g.outs[oi].node == static_cast<int>(i) && g.outs[oi].port == p)
                        cs.push_back(h_mix(0xC0FFEE0000000000ull, oi));
                for (const auto& r : g.deleted)
                    if (r.node == static_cast<int>(i) && r.port == p)
                        cs.push_back(0xDE1E7Eull);
                std::sort(cs.begin(), cs.end());
                uint64_t hp = h_mix(0xAAAA, static_cast<uint64_t>(p));
                for (uint64_t c : cs) hp = h_mix(hp, c);
                h = h_mix(h, hp);
            }
            next[i] = h;
        }
        if (next == colour) break;
        colour = std::move(next);
    }
    return Colouring{std::move(colour)};
}

inline std::vector<uint64_t> initial_colours(const ValueGraph& g) {
    std::vector<uint64_t> c;
    c.reserve(g.nodes.size());
    for (const auto& nd : g.nodes) c.push_back(splitmix64(fnv1a(nd.key)));
    return c;
}

inline std::string serialize_with_order(const ValueGraph& g, const std::vector<int>& order) {
    // order[i] = canonical position of node i
    std::vector<int> inv(order.size());
    for (size_t i = 0; i < order.size(); ++i) inv[static_cast<size_t>(order[i])] = static_cast<int>(i);

    std::map<std::string, int> alpha;  // ua-id -> alpha index in canonical order
    auto alpha_of = [&](const std::string& ua) {
        auto it = alpha.find(ua);
        if (it != alpha.end()) return it->second;
        int k = static_cast<int>(alpha.size());
        alpha.emplace(ua, k);
        return k;
    };

    auto ref_str = [&](const Ref& r) {
        if (r.node < 0) return "b" + std::to_string(r.port);
        return "n" + std::to_string(inv[static_cast<size_t>(r.node)]) + "." + std::to_string(r.port);
    };

    std::ostringstream os;
    os << "ins:";
    for (const auto& s : g.in_shapes) os << s.key();
    os << "\n";
    for (size_t pos = 0; pos < order.size(); ++pos) {
        const Node& nd = g.nodes[static_cast<size_t>(order[pos])];
        os << "n" << pos << ":" << nd.key;
        if (!nd.ua.empty()) os << "\x06#" << alpha_of(nd.ua);
        os << "<-";
        for (const auto& r : nd.ins) os << ref_str(r) << ",";
        os << "\n";
    }
    std::vector<std::string> dels;
    for (const auto& r : g.deleted) dels.push_back(ref_str(r));
    std::sort(dels.begin(), dels.end());
    for (const auto& s : dels) os << "del:" << s << "\n";
    os << "outs:";
    for (const auto& r : g.outs) os << ref_str(r) << ",";
    os << "\n";
    return os.str();
}

// Order nodes by colour; individualise ties taking the lexicographically
// least code. Topological consistency is not required for uniqueness, the
// refs are positional either way.
inline std::string canonical_serialize(const ValueGraph& g, std::vector<uint64_t> base, int depth = 0) {
    Colouring c = refine(g, std::move(base));
    size_t n = g.nodes.size();
    std::vector<int> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return c.colour[static_cast<size_t>(a)] < c.colour[static_cast<size_t>(b)]; });

    // find first tied class
    int tie_at = -1;
    for (size_t i = 0; i + 1 < n; ++i)
        if (c.colour[static_cast<size_t>(idx[i])] == c.colour[static_cast<size_t>(idx[i + 1])]) {
            tie_at = static_cast<int>(i);
            break;
        }
    if (tie_at < 0 || depth > 12) return serialize_with_order(g, idx);

    uint64_t tied_colour = c.colour[static_cast<size_t>(idx[static_cast<size_t>(tie_at)])];
    std::string best;
    for (size_t i = 0; i < n; ++i) {
        if (c.colour[i] != tied_colour) continue;
        std::vector<uint64_t> ind = c.colour;
        ind[i] = h_mix(ind[i], 0x1D1D1D1Dull);
        std::string s = canonical_serialize(g, std::move(ind), depth + 1);
        if (best.empty() || s < best) best = std::move(s);
    }
    return best;
}

}  // namespace canon

inline CanonicalCode canonicalize(const Diagram& d) {
    TypeReport rep = validate(d);
    if (!rep.ok()) throw InvalidDiagram("canonicalize requires a valid diagram:\n" + rep.str());
    canon::ValueGraph g = canon::build_value_graph(d);
    return canon::canonical_serialize(g, canon::initial_colours(g));
}

// Short printable digest of a canonical code.
inline std::string code_digest(const CanonicalCode& code) {
    uint64_t h = fnv1a(code);
    char buf[17];
    snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace attncalc

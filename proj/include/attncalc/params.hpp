// SPDX-License-Identifier: Apache-2.0
//
// Parameter storage for learnable boxes.
//
// A learnable box is either a function (realised as a stack of affine
// layers with ReLU between consecutive layers; one hidden layer by
// default) or a raw tensor (0-input boxes such as weight matrices and
// layer-norm gains). An empty layer stack is the identity function,
// which witness constructions use for identity-initialised boxes.
//
// Function boxes map over a shared leading index block and act on the
// innermost feature axis: a box (L+[f1], L+[f2]) -> (L+[g]) concatenates
// features, applies the stack per L-index, and splits outputs.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "attncalc/diagram.hpp"
#include "attncalc/rng.hpp"
#include "attncalc/tensor.hpp"

namespace attncalc {

struct MissingParams : std::runtime_error {
    explicit MissingParams(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeFault : std::runtime_error {
    explicit ShapeFault(const std::string& what) : std::runtime_error(what) {}
};

template <typename R>
struct MlpT {
    struct Layer {
        TensorT<R> W;  // [out, in]
        TensorT<R> b;  // [out]
        bool act = false;  // ReLU after this layer
    };
    std::vector<Layer> layers;  // empty stack = identity

    int64_t in_width() const { return layers.empty() ? -1 : layers.front().W.shape[1]; }
    int64_t out_width() const { return layers.empty() ? -1 : layers.back().W.shape[0]; }

    // Affine layers with ReLU where a layer's act flag is set. The default
    // one-hidden-layer stack is [act, no act]; stacks produced by fusion
    // keep their original flags, which is what makes fusion exact.
    std::vector<R> forward(const std::vector<R>& x) const {
        std::vector<R> h = x;
        for (size_t li = 0; li < layers.size(); ++li) {
            const Layer& L = layers[li];
            int64_t out = L.W.shape[0], in = L.W.shape[1];
            if (static_cast<int64_t>(h.size()) != in)
                throw ShapeFault("mlp layer input width mismatch");
            std::vector<R> z(static_cast<size_t>(out));
            for (int64_t o = 0; o < out; ++o) {
                R acc = L.b.data[static_cast<size_t>(o)];
                const R* row = L.W.data.data() + o * in;
                for (int64_t i = 0; i < in; ++i) acc += row[i] * h[static_cast<size_t>(i)];
                z[static_cast<size_t>(o)] = acc;
            }
            if (L.act)
                for (R& v : z) v = v > R(0) ? v : R(0);
            h = std::move(z);
        }
        return h;
    }
};

template <typename R>
struct ParamEntryT {
    enum class Kind { Mlp, Raw } kind = Kind::Mlp;
    MlpT<R> mlp;
    TensorT<R> raw;
};

template <typename R>
struct ParamStoreT {
    std::map<std::string, ParamEntryT<R>> entries;
    uint64_t seed = 0;

    bool has(const std::string& ua) const { return entries.count(ua) > 0; }
    const ParamEntryT<R>& at(const std::string& ua) const {
        auto it = entries.find(ua);
        if (it == entries.end()) throw MissingParams("no parameters for learnable box '" + ua + "'");
        return it->second;
    }
    ParamEntryT<R>& at(const std::string& ua) {
        auto it = entries.find(ua);
        if (it == entries.end()) throw MissingParams("no parameters for learnable box '" + ua + "'");
        return it->second;
    }

    template <typename R2>
    ParamStoreT<R2> cast() const {
        ParamStoreT<R2> out;
        out.seed = seed;
        for (const auto& [k, e] : entries) {
            ParamEntryT<R2> e2;
            e2.kind = e.kind == ParamEntryT<R>::Kind::Mlp ? ParamEntryT<R2>::Kind::Mlp
                                                          : ParamEntryT<R2>::Kind::Raw;
            for (const auto& L : e.mlp.layers)
                e2.mlp.layers.push_back(
                    {L.W.template cast<R2>(), L.b.template cast<R2>(), L.act});
            e2.raw = e.raw.template cast<R2>();
            out.entries.emplace(k, std::move(e2));
        }
        return out;
    }
};

using ParamStore = ParamStoreT<double>;

// ---- learnable box signature resolution -------------------------------------

struct UaSignature {
    std::vector<int64_t> lead;       // shared leading index block
    std::vector<int64_t> in_feats;   // per input feature width (1 when shape == lead)
    std::vector<int64_t> out_feats;  // per output
    int64_t rows() const {
        int64_t n = 1;
        for (int64_t d : lead) n *= d;
        return n;
    }
    int64_t fin() const {
        int64_t n = 0;
        for (int64_t f : in_feats) n += f;
        return n;
    }
    int64_t gout() const {
        int64_t n = 0;
        for (int64_t f : out_feats) n += f;
        return n;
    }
};

inline UaSignature ua_signature(const Box& b, const Binding& binding) {
    if (b.outs.empty()) throw ShapeFault("learnable box without outputs");
    UaSignature sig;
    const Shape& o0 = b.outs[0];
    std::vector<int64_t> lead;
    if (o0.rank() > 0) {
        for (size_t i = 0; i + 1 < o0.rank(); ++i) lead.push_back(binding.resolve(o0.dims[i]));
    }
    sig.lead = lead;
    auto feat_of = [&](const Shape& s) -> int64_t {
        std::vector<int64_t> r = s.resolve(binding);
        if (r.size() == lead.size()) {
            for (size_t i = 0; i < lead.size(); ++i)
                if (r[i] != lead[i]) throw ShapeFault("learnable box leading axes disagree");
            return 1;
        }
        if (r.size() != lead.size() + 1) throw ShapeFault("learnable box rank mismatch");
        for (size_t i = 0; i < lead.size(); ++i)
            if (r[i] != lead[i]) throw ShapeFault("learnable box leading axes disagree");
        return r.back();
    };
    for (const auto& s : b.ins) sig.in_feats.push_back(feat_of(s));
    for (const auto& s : b.outs) sig.out_feats.push_back(feat_of(s));
    return sig;
}

// ---- deterministic initialisation --------------------------------------------

template <typename R>
TensorT<R> init_uniform(const std::vector<int64_t>& shape, double bound, uint64_t seed,
                        const std::string& stream) {
    CounterRng rng(seed, stream);
    TensorT<R> t(shape);
    for (auto& v : t.data) v = static_cast<R>(rng.next_uniform(-bound, bound));
    return t;
}

// One hidden layer, hidden width = total input feature width.
template <typename R>
MlpT<R> make_mlp(int64_t fin, int64_t gout, uint64_t seed, const std::string& ua) {
    int64_t hidden = fin;
    MlpT<R> mlp;
    double b1 = 1.0 / std::sqrt(static_cast<double>(fin));
    mlp.layers.push_back({init_uniform<R>({hidden, fin}, b1, seed, "ua/" + ua + "/W1"),
                          init_uniform<R>({hidden}, b1, seed, "ua/" + ua + "/b1"), true});
    double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    mlp.layers.push_back({init_uniform<R>({gout, hidden}, b2, seed, "ua/" + ua + "/W2"),
                          init_uniform<R>({gout}, b2, seed, "ua/" + ua + "/b2"), false});
    return mlp;
}

template <typename R>
ParamEntryT<R> instantiate_ua_entry(const Box& b, const Binding& binding, uint64_t seed) {
    ParamEntryT<R> e;
    if (b.ins.empty()) {
        e.kind = ParamEntryT<R>::Kind::Raw;
        std::vector<int64_t> shape = b.outs[0].resolve(binding);
        int64_t fan_in = 1;
        if (shape.size() >= 2)
            fan_in = shape[0];
        else if (shape.size() == 1)
            fan_in = shape[0];
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        e.raw = init_uniform<R>(shape, bound, seed, "ua/" + b.op + "/raw");
    } else {
        e.kind = ParamEntryT<R>::Kind::Mlp;
        UaSignature sig = ua_signature(b, binding);
        e.mlp = make_mlp<R>(sig.fin(), sig.gout(), seed, b.op);
    }
    return e;
}

// Populate `store` with entries for every learnable box in the diagram
// (recursing into simd bodies). Existing entries are kept.
template <typename R>
void instantiate_params(ParamStoreT<R>& store, const Diagram& d, const Binding& binding,
                        uint64_t seed) {
    store.seed = seed;
    for (const auto& [id, b] : d.boxes) {
        if (b.kind == BoxKind::Learnable && !store.has(b.op))
            store.entries.emplace(b.op, instantiate_ua_entry<R>(b, binding, seed));
        if (b.kind == BoxKind::Simd && b.body) instantiate_params(store, *b.body, binding, seed);
    }
}

template <typename R>
ParamStoreT<R> instantiate_params(const Diagram& d, const Binding& binding, uint64_t seed) {
    ParamStoreT<R> store;
    instantiate_params(store, d, binding, seed);
    return store;
}

}  // namespace attncalc

// SPDX-License-Identifier: Apache-2.0
//
// Dimension symbols, shapes and bindings for the diagram IR.
//
// A wire in a diagram carries a Shape: an ordered list of dimension
// symbols. A symbol is either fixed by the modeller (Fixed), supplied at
// inference time (Seq), or a literal integer (Lit). Symbols may carry an
// optional role tag (printed as `s^(q)`) used to tell apart two axes with
// the same symbol, e.g. the query and key axes of an attention matrix.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace attncalc {

enum class DimKind : uint8_t { Fixed, Seq, Lit };

// A dimension is mult * (named symbol), or a literal. The multiplier is
// the only arithmetic shapes support beyond products; it is what makes
// concatenation along an axis typeable (d + d = 2*d).
struct DimSym {
    DimKind kind = DimKind::Lit;
    std::string name;   // Fixed/Seq symbol name
    int64_t lit = 1;    // Lit value, >= 1
    int64_t mult = 1;   // multiplier on a named symbol
    std::string role;   // optional disambiguation tag, not semantic

    static DimSym fixed(std::string n, std::string r = {}) {
        return DimSym{DimKind::Fixed, std::move(n), 0, 1, std::move(r)};
    }
    static DimSym seq(std::string n, std::string r = {}) {
        return DimSym{DimKind::Seq, std::move(n), 0, 1, std::move(r)};
    }
    static DimSym of(int64_t v) {
        if (v < 1) throw std::invalid_argument("literal dimension must be >= 1");
        return DimSym{DimKind::Lit, {}, v, 1, {}};
    }

    DimSym with_role(std::string r) const {
        DimSym d = *this;
        d.role = std::move(r);
        return d;
    }
    DimSym bare() const { return DimSym{kind, name, lit, mult, {}}; }
    DimSym times(int64_t k) const {
        DimSym d = *this;
        if (kind == DimKind::Lit)
            d.lit *= k;
        else
            d.mult *= k;
        return d;
    }

    // Identity of the symbol itself; roles are annotations and do not
    // participate in shape agreement.
    bool same_symbol(const DimSym& o) const {
        if (kind != o.kind) return false;
        return kind == DimKind::Lit ? lit == o.lit : (name == o.name && mult == o.mult);
    }

    // Key used by canonical encodings and maps (role-insensitive).
    std::string key() const {
        std::string m = mult == 1 ? "" : std::to_string(mult) + "*";
        switch (kind) {
            case DimKind::Fixed: return "f:" + m + name;
            case DimKind::Seq: return "s:" + m + name;
            default: return "#" + std::to_string(lit);
        }
    }

    std::string str() const {
        std::string base;
        if (kind == DimKind::Lit)
            base = std::to_string(lit);
        else
            base = (mult == 1 ? "" : std::to_string(mult) + "*") + name;
        if (!role.empty()) base += "^(" + role + ")";
        return base;
    }
};

inline bool operator==(const DimSym& a, const DimSym& b) { return a.same_symbol(b); }
inline bool operator!=(const DimSym& a, const DimSym& b) { return !(a == b); }

// Assignment of positive integers to Fixed/Seq symbol names.
class Binding {
public:
    Binding() = default;
    Binding(std::initializer_list<std::pair<const std::string, int64_t>> init) : map_(init) {}

    void set(const std::string& name, int64_t v) {
        if (v < 1) throw std::invalid_argument("binding values must be >= 1");
        map_[name] = v;
    }
    bool has(const std::string& name) const { return map_.count(name) > 0; }

    int64_t resolve(const DimSym& d) const {
        if (d.kind == DimKind::Lit) return d.lit;
        auto it = map_.find(d.name);
        if (it == map_.end()) throw std::runtime_error("unbound dimension symbol: " + d.name);
        return d.mult * it->second;
    }
    std::optional<int64_t> try_resolve(const DimSym& d) const {
        if (d.kind == DimKind::Lit) return d.lit;
        auto it = map_.find(d.name);
        if (it == map_.end()) return std::nullopt;
        return d.mult * it->second;
    }
    const std::map<std::string, int64_t>& entries() const { return map_; }

private:
    std::map<std::string, int64_t> map_;
};

struct Shape {
    std::vector<DimSym> dims;

    Shape() = default;
    Shape(std::initializer_list<DimSym> d) : dims(d) {}
    explicit Shape(std::vector<DimSym> d) : dims(std::move(d)) {}

    size_t rank() const { return dims.size(); }
    bool scalar() const { return dims.empty(); }

    Shape prepend(const DimSym& d) const {
        Shape s;
        s.dims.reserve(dims.size() + 1);
        s.dims.push_back(d);
        s.dims.insert(s.dims.end(), dims.begin(), dims.end());
        return s;
    }
    Shape append(const DimSym& d) const {
        Shape s = *this;
        s.dims.push_back(d);
        return s;
    }
    Shape drop(size_t pos) const {
        Shape s = *this;
        s.dims.erase(s.dims.begin() + static_cast<ptrdiff_t>(pos));
        return s;
    }
    Shape concat(const Shape& o) const {
        Shape s = *this;
        s.dims.insert(s.dims.end(), o.dims.begin(), o.dims.end());
        return s;
    }

    int64_t element_count(const Binding& b) const {
        int64_t n = 1;
        for (const auto& d : dims) n *= b.resolve(d);
        return n;
    }
    std::vector<int64_t> resolve(const Binding& b) const {
        std::vector<int64_t> out;
        out.reserve(dims.size());
        for (const auto& d : dims) out.push_back(b.resolve(d));
        return out;
    }

    // Symbolic element-count product: multiset of non-literal symbol keys
    // plus the product of literals. Two shapes have equal element counts
    // under every binding iff these agree.
    std::pair<std::multiset<std::string>, int64_t> symbolic_product() const;

    std::string str() const {
        std::string s = "[";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ", ";
            s += dims[i].str();
        }
        return s + "]";
    }
    std::string key() const {
        std::string s = "[";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += dims[i].key();
        }
        return s + "]";
    }
};

inline bool operator==(const Shape& a, const Shape& b) {
    if (a.dims.size() != b.dims.size()) return false;
    for (size_t i = 0; i < a.dims.size(); ++i)
        if (!a.dims[i].same_symbol(b.dims[i])) return false;
    return true;
}
inline bool operator!=(const Shape& a, const Shape& b) { return !(a == b); }

inline std::pair<std::multiset<std::string>, int64_t> Shape::symbolic_product() const {
    std::multiset<std::string> syms;
    int64_t lits = 1;
    for (const auto& d : dims) {
        if (d.kind == DimKind::Lit) {
            lits *= d.lit;
        } else {
            lits *= d.mult;  // the multiplier is a literal factor
            DimSym unit = d;
            unit.mult = 1;
            unit.role.clear();
            syms.insert(unit.key());
        }
    }
    return {syms, lits};
}

inline bool same_element_count(const Shape& a, const Shape& b) {
    return a.symbolic_product() == b.symbolic_product();
}

}  // namespace attncalc

// SPDX-License-Identifier: Apache-2.0
//
// Rewrite engine: rule interface, matching, application, normalization,
// equivalence and derivation replay.
//
// Rules match procedurally (anchored at their characteristic box kind)
// and may match inside simd bodies; the base class handles the recursion
// and locator prefixes. Matched regions are convex by construction of the
// individual rules.

#pragma once

#include <memory>
#include <optional>

#include "attncalc/canonical.hpp"
#include "attncalc/diagram.hpp"
#include "attncalc/eval.hpp"
#include "attncalc/grad.hpp"
#include "attncalc/serialize.hpp"

namespace attncalc {

enum class RuleKind { Semantic, Expressivity, StructuralEdit };
enum class Direction { Fwd, Bwd };

inline const char* rule_kind_name(RuleKind k) {
    switch (k) {
        case RuleKind::Semantic: return "semantic";
        case RuleKind::Expressivity: return "expressivity";
        case RuleKind::StructuralEdit: return "structural-edit";
    }
    return "?";
}

struct Match {
    std::string rule;
    std::string locator;           // stable token; simd nesting prefixed "s<id>/"
    std::vector<BoxId> path;       // simd boxes entered, outermost first
    std::map<std::string, BoxId> boxes;  // pattern element -> box id (local level)
    std::map<std::string, int64_t> ints; // auxiliary payload
};

struct StaleMatch : std::runtime_error {
    explicit StaleMatch(const std::string& what) : std::runtime_error(what) {}
};
struct IllegalDirection : std::runtime_error {
    explicit IllegalDirection(const std::string& what) : std::runtime_error(what) {}
};
struct UnsupportedRule : std::runtime_error {
    explicit UnsupportedRule(const std::string& what) : std::runtime_error(what) {}
};
struct BudgetExhausted : std::runtime_error {
    explicit BudgetExhausted(const std::string& what) : std::runtime_error(what) {}
};

// A randomized, self-contained instance for the numerical soundness suite.
struct RuleInstance {
    Diagram diagram;
    Match match;
    Binding binding;
};

class RewriteRule {
public:
    RewriteRule(std::string name, RuleKind kind) : name_(std::move(name)), kind_(kind) {}
    virtual ~RewriteRule() = default;

    const std::string& name() const { return name_; }
    RuleKind kind() const { return kind_; }
    virtual std::string describe() const { return name_; }
    virtual bool supports(Direction dir) const { return dir == Direction::Fwd; }
    // true when the forward direction strictly shrinks the diagram, making
    // the rule safe for normalization
    virtual bool normalizing() const { return false; }

    std::vector<Match> find(const Diagram& d, Direction dir = Direction::Fwd) const {
        std::vector<Match> out = supports(dir) ? find_flat(d, dir) : std::vector<Match>{};
        for (auto& m : out) m.rule = name_;
        for (const auto& [id, b] : d.boxes) {
            if (b.kind != BoxKind::Simd) continue;
            for (Match m : find(*b.body, dir)) {
                m.locator = "s" + std::to_string(id) + "/" + m.locator;
                m.path.insert(m.path.begin(), id);
                out.push_back(std::move(m));
            }
        }
        std::sort(out.begin(), out.end(),
                  [](const Match& a, const Match& b) { return a.locator < b.locator; });
        return out;
    }

    Diagram apply(const Diagram& d, const Match& m, Direction dir) const {
        if (!supports(dir)) throw IllegalDirection("rule " + name_ + " does not support this direction");
        if (m.path.empty()) {
            Diagram out = apply_flat(d, m, dir);
            return out;
        }
        BoxId sid = m.path.front();
        if (!d.has_box(sid) || d.box(sid).kind != BoxKind::Simd)
            throw StaleMatch("match path names a missing simd box");
        Match inner = m;
        inner.path.erase(inner.path.begin());
        size_t slash = inner.locator.find('/');
        inner.locator = slash == std::string::npos ? inner.locator : inner.locator.substr(slash + 1);
        Diagram body2 = apply(*d.box(sid).body, inner, dir);
        Diagram out = d;
        Box nb = out.boxes.at(sid);
        nb.body = std::make_shared<Diagram>(std::move(body2));
        out.boxes.at(sid) = std::move(nb);
        return out;
    }

    virtual std::optional<RuleInstance> random_instance(uint64_t seed) const {
        (void)seed;
        return std::nullopt;
    }

    // Parameter transport for witnessed rules (forward direction).
    virtual std::optional<ParamStore> witness(const Diagram& d, const Match& m,
                                              const ParamStore& lhs_params) const {
        (void)d;
        (void)m;
        (void)lhs_params;
        return std::nullopt;
    }

protected:
    virtual std::vector<Match> find_flat(const Diagram& d, Direction dir) const = 0;
    virtual Diagram apply_flat(const Diagram& d, const Match& m, Direction dir) const = 0;

    static const Box& need_box(const Diagram& d, BoxId id, BoxKind kind, const std::string& who) {
        if (!d.has_box(id)) throw StaleMatch(who + ": box " + std::to_string(id) + " is gone");
        const Box& b = d.box(id);
        if (b.kind != kind) throw StaleMatch(who + ": box " + std::to_string(id) + " changed kind");
        return b;
    }

private:
    std::string name_;
    RuleKind kind_;
};

using RulePtr = std::shared_ptr<const RewriteRule>;

struct RuleSet {
    std::vector<RulePtr> rules;

    const RewriteRule* by_name(const std::string& n) const {
        for (const auto& r : rules)
            if (r->name() == n) return r.get();
        return nullptr;
    }
    RuleSet with(RulePtr r) const {
        RuleSet out = *this;
        out.rules.push_back(std::move(r));
        return out;
    }
    size_t size() const { return rules.size(); }
};

// ---- public operations -------------------------------------------------------

inline std::vector<Match> match_pattern(const Diagram& d, const RewriteRule& r) {
    require_valid(d, "match target");
    return r.find(d);
}

inline Diagram apply_rule(const Diagram& d, const RewriteRule& r, const Match& m, Direction dir) {
    Diagram out = r.apply(d, m, dir);
    TypeReport rep = validate(out);
    if (!rep.ok())
        throw InvalidDiagram("rule " + r.name() + " produced an invalid diagram:\n" + rep.str());
    if (out.ins.size() != d.ins.size() || out.outs.size() != d.outs.size())
        throw InvalidDiagram("rule " + r.name() + " changed the boundary arity");
    for (size_t i = 0; i < d.ins.size(); ++i)
        if (!(out.ins[i] == d.ins[i])) throw InvalidDiagram("rule changed input shape");
    for (size_t i = 0; i < d.outs.size(); ++i)
        if (!(out.outs[i] == d.outs[i])) throw InvalidDiagram("rule changed output shape");
    return out;
}

namespace rwdetail {

inline size_t count_learnables(const Diagram& d) { return d.count_kind(BoxKind::Learnable); }
inline size_t count_solid(const Diagram& d) {
    return d.total_boxes() - d.count_kind(BoxKind::Copy) - d.count_kind(BoxKind::Delete);
}
// Input ports over non-copy, non-delete boxes; shrinks when a rule narrows
// a box without removing one (dropping a concat argument).
inline size_t count_solid_ports(const Diagram& d) {
    size_t n = 0;
    for (const auto& [id, b] : d.boxes) {
        if (b.kind != BoxKind::Copy && b.kind != BoxKind::Delete) n += b.ins.size();
        if (b.kind == BoxKind::Simd && b.body) n += count_solid_ports(*b.body);
    }
    return n;
}

inline std::tuple<size_t, size_t, size_t> shrink_metric(const Diagram& d) {
    return {count_learnables(d), count_solid(d) + count_solid_ports(d), d.total_boxes()};
}

}  // namespace rwdetail

// Exhaustive forward application of the normalizing subset until fixpoint.
// Each step strictly decreases (learnable count, non-copy box count, total
// boxes) lexicographically, so this terminates.
inline Diagram normalize(const Diagram& d, const RuleSet& rules, size_t* steps_taken = nullptr) {
    Diagram cur = d;
    size_t guard =
        4 * (cur.total_boxes() + rwdetail::count_solid_ports(cur) + 4) *
            (rwdetail::count_learnables(cur) + 2) +
        64;
    size_t steps = 0;
    bool changed = true;
    while (changed) {
        if (steps > guard) throw std::logic_error("normalize failed to terminate");
        changed = false;
        for (const auto& r : rules.rules) {
            if (!r->normalizing()) continue;
            auto ms = r->find(cur);
            if (ms.empty()) continue;
            auto prev = rwdetail::shrink_metric(cur);
            cur = apply_rule(cur, *r, ms.front(), Direction::Fwd);
            auto now = rwdetail::shrink_metric(cur);
            if (!(now < prev))
                throw std::logic_error("normalizing rule " + r->name() + " did not shrink");
            ++steps;
            changed = true;
            break;
        }
    }
    if (steps_taken) *steps_taken = steps;
    return cur;
}

inline bool equivalent(const Diagram& d1, const Diagram& d2, const RuleSet& rules,
                       size_t budget = 10000) {
    if (d1.ins.size() != d2.ins.size() || d1.outs.size() != d2.outs.size()) return false;
    for (size_t i = 0; i < d1.ins.size(); ++i)
        if (!(d1.ins[i] == d2.ins[i])) return false;
    for (size_t i = 0; i < d1.outs.size(); ++i)
        if (!(d1.outs[i] == d2.outs[i])) return false;
    size_t s1 = 0, s2 = 0;
    Diagram n1 = normalize(d1, rules, &s1);
    if (s1 > budget) throw BudgetExhausted("normalization of the first diagram exceeded the budget");
    Diagram n2 = normalize(d2, rules, &s2);
    if (s1 + s2 > budget) throw BudgetExhausted("normalization exceeded the budget");
    return canonicalize(n1) == canonicalize(n2);
}

// ---- derivations and replay ----------------------------------------------------

struct DerivationStep {
    std::string rule;
    std::string locator;
    Direction dir = Direction::Fwd;
};

struct Derivation {
    std::string name;
    Diagram start;
    std::vector<DerivationStep> steps;
};

struct StepRecord {
    size_t index = 0;
    std::string rule;
    RuleKind kind = RuleKind::Semantic;
    bool applied = false;
    double cert_rel_err = 0.0;  // semantic steps only
    std::string error;
};

struct Trace {
    std::vector<Diagram> diagrams;  // start, then one per applied step
    std::vector<StepRecord> steps;
    bool ok = true;
    size_t failed_at = 0;
};

struct StepInapplicable : std::runtime_error {
    size_t index;
    StepInapplicable(size_t i, const std::string& what) : std::runtime_error(what), index(i) {}
};
struct SemanticStepFailedNumerically : std::runtime_error {
    size_t index;
    SemanticStepFailedNumerically(size_t i, const std::string& what)
        : std::runtime_error(what), index(i) {}
};

constexpr uint64_t kCertSeed = 0xA77E;

// Deterministic certificate binding: sequence symbols get small lengths,
// fixed symbols small widths.
inline Binding certificate_binding(const Diagram& d, uint64_t seed) {
    std::map<std::string, DimKind> dims;
    textio::collect_dims(d, dims);
    Binding b;
    CounterRng rng(seed, "cert-binding");
    for (const auto& [name, kind] : dims) {
        int64_t v = kind == DimKind::Seq ? 2 + static_cast<int64_t>(rng.next_below(7))
                                         : 2 + static_cast<int64_t>(rng.next_below(5));
        b.set(name, v);
    }
    return b;
}

// Interpreter-equality certificate between two diagrams with the same
// boundary, at a random binding/params/inputs drawn from `seed`.
inline double interp_equality(const Diagram& before, const Diagram& after, uint64_t seed) {
    Binding binding = certificate_binding(before, seed);
    ParamStore params;
    instantiate_params(params, before, binding, seed);
    instantiate_params(params, after, binding, seed);  // fills any fresh ids
    CounterRng rng(seed, "cert-input");
    std::vector<TensorValue> inputs;
    for (const auto& s : before.ins) {
        TensorValue t(s.resolve(binding));
        for (auto& v : t.data) v = rng.next_uniform(-1.0, 1.0);
        inputs.push_back(std::move(t));
    }
    auto o1 = eval(before, binding, params, inputs);
    auto o2 = eval(after, binding, params, inputs);
    return rel_err(o1, o2);
}

inline Trace replay(const Derivation& der, const RuleSet& rules, double tol = 1e-6,
                    bool throw_on_failure = false) {
    Trace tr;
    tr.diagrams.push_back(der.start);
    Diagram cur = der.start;
    for (size_t i = 0; i < der.steps.size(); ++i) {
        const DerivationStep& st = der.steps[i];
        StepRecord rec;
        rec.index = i;
        rec.rule = st.rule;
        const RewriteRule* r = rules.by_name(st.rule);
        if (!r) {
            rec.error = "unknown rule";
            tr.steps.push_back(rec);
            tr.ok = false;
            tr.failed_at = i;
            if (throw_on_failure) throw StepInapplicable(i, "unknown rule " + st.rule);
            return tr;
        }
        rec.kind = r->kind();
        auto ms = r->find(cur, st.dir);
        const Match* found = nullptr;
        for (const auto& m : ms)
            if (m.locator == st.locator) found = &m;
        if (!found) {
            rec.error = "no match at locator " + st.locator;
            tr.steps.push_back(rec);
            tr.ok = false;
            tr.failed_at = i;
            if (throw_on_failure) throw StepInapplicable(i, rec.error);
            return tr;
        }
        Diagram next = apply_rule(cur, *r, *found, st.dir);
        if (r->kind() == RuleKind::Semantic) {
            rec.cert_rel_err = interp_equality(cur, next, kCertSeed + i);
            if (!(rec.cert_rel_err <= tol)) {
                rec.error = "certificate exceeded tolerance";
                tr.steps.push_back(rec);
                tr.ok = false;
                tr.failed_at = i;
                if (throw_on_failure)
                    throw SemanticStepFailedNumerically(i, "step " + std::to_string(i));
                return tr;
            }
        }
        rec.applied = true;
        tr.steps.push_back(rec);
        cur = std::move(next);
        tr.diagrams.push_back(cur);
    }
    return tr;
}

}  // namespace attncalc

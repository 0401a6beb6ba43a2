// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "attncalc/rules.hpp"

using namespace attncalc;

namespace {
const DimSym S = DimSym::seq("s");
const DimSym D = DimSym::fixed("d");
const Shape SD{S, D};

RuleSet normalize_rules() {
    RuleSet all = builtin_rules();
    RuleSet subset;
    for (const auto& r : all.rules)
        if (r->name() == "copy-concat-collapse" || r->name() == "concat-absorb" ||
            r->name() == "ua-fusion" || r->name() == "concat-flatten")
            subset.rules.push_back(r);
    return subset;
}

// x duplicated into concat+mlp: the one-generator merge pattern
Diagram concat_ff_on_copies(const std::string& ua = "C") {
    Builder bl;
    Val x = bl.input(SD);
    auto [a, b] = bl.copy(x);
    Val cc = bl.add1(concat_box(SD, SD), {a, b});
    bl.output(bl.add1(learnable_box(ua, {cc.shape}, {SD}), {cc}));
    return bl.finish();
}

}  // namespace

TEST_CASE("builtin catalog has at least 14 named rules") {
    RuleSet rs = builtin_rules();
    REQUIRE(rs.size() >= 14);
    std::set<std::string> names;
    for (const auto& r : rs.rules) names.insert(r->name());
    REQUIRE(names.size() == rs.size());  // no duplicate names
    for (const char* want :
         {"tightening", "yanking", "strength", "sliding-1", "sliding-2", "vanishing",
          "copy-naturality", "braid-naturality", "contract-assoc", "simd-split", "pull-constant",
          "contract-simd-unfold", "ua-fusion", "copy-concat-collapse", "concat-absorb"})
        REQUIRE(names.count(want) == 1);
}

TEST_CASE("every semantic rule passes 20 randomized interpreter-equality instances") {
    RuleSet rs = builtin_rules();
    for (const auto& r : rs.rules) {
        if (r->kind() != RuleKind::Semantic) continue;
        INFO("rule " << r->name());
        size_t instances = 0;
        for (uint64_t seed = 0; seed < 20; ++seed) {
            auto inst = r->random_instance(seed);
            if (!inst) continue;
            ++instances;
            Diagram after = apply_rule(inst->diagram, *r, inst->match, Direction::Fwd);
            double err = interp_equality(inst->diagram, after, kCertSeed ^ (seed * 1315423911ull));
            INFO("seed " << seed << " rel err " << err);
            REQUIRE(err <= 1e-6);
        }
        REQUIRE(instances == 20);
    }
}

TEST_CASE("finite-iteration laws cover counts 1, 2, 3 and 5") {
    RuleSet rs = builtin_rules();
    const RewriteRule* van = rs.by_name("vanishing");
    REQUIRE(van);
    std::set<int64_t> seen;
    for (uint64_t seed = 0; seed < 16; ++seed) {
        auto inst = van->random_instance(seed);
        REQUIRE(inst);
        for (const auto& [id, b] : inst->diagram.boxes)
            if (b.kind == BoxKind::Simd) seen.insert(b.attr_dim("index").lit);
    }
    for (int64_t k : {1, 2, 3, 5}) REQUIRE(seen.count(k) == 1);
}

TEST_CASE("yanking requires the residual to match the lane sort") {
    RuleSet rs = builtin_rules();
    const RewriteRule* yank = rs.by_name("yanking");
    DimSym H = DimSym::fixed("h");
    Shape U{H}, A{D};
    // a mismatched residual cannot even be constructed as a fold
    REQUIRE_THROWS_AS(make_simd_box(std::make_shared<Diagram>(swap_diagram(U, A)), S, true),
                      ResidualMismatch);
    // and a plain (non-residual) crossing is not a yanking site
    Builder outer;
    Val us = outer.input(U.prepend(S));
    Val as = outer.input(A.prepend(S));
    Box sb = make_simd_box(std::make_shared<Diagram>(swap_diagram(U, A)), S, false);
    auto r = outer.add(sb, {us, as});
    outer.output(r[0]);
    outer.output(r[1]);
    Diagram bad = outer.finish();
    REQUIRE(validate(bad).ok());
    REQUIRE(yank->find(bad, Direction::Fwd).empty());
}

TEST_CASE("matching the fusion pattern on a chain finds exactly one site") {
    Builder bl;
    Val x = bl.input(SD);
    Val y = bl.add1(learnable_box("f", {SD}, {SD}), {x});
    bl.output(bl.add1(learnable_box("g", {SD}, {SD}), {y}));
    Diagram d = bl.finish();
    RuleSet rs = builtin_rules();
    auto ms = match_pattern(d, *rs.by_name("ua-fusion"));
    REQUIRE(ms.size() == 1);
}

TEST_CASE("copy-concat-collapse matches the one-generator merge model exactly once") {
    Diagram d = concat_ff_on_copies();
    RuleSet rs = builtin_rules();
    auto ms = match_pattern(d, *rs.by_name("copy-concat-collapse"));
    REQUIRE(ms.size() == 1);
}

TEST_CASE("applying then un-applying a semantic rule returns to the same code") {
    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("contract-simd-unfold");
    auto inst = r->random_instance(3);
    REQUIRE(inst);
    CanonicalCode before = canonicalize(inst->diagram);
    Diagram mid = apply_rule(inst->diagram, *r, inst->match, Direction::Fwd);
    auto back = r->find(mid, Direction::Bwd);
    REQUIRE_FALSE(back.empty());
    Diagram again = apply_rule(mid, *r, back.front(), Direction::Bwd);
    REQUIRE(canonicalize(again) == before);
}

TEST_CASE("boundary shapes are preserved by every applied rule instance") {
    RuleSet rs = builtin_rules();
    for (const auto& r : rs.rules) {
        if (r->kind() != RuleKind::Semantic) continue;
        auto inst = r->random_instance(1);
        if (!inst) continue;
        Diagram after = apply_rule(inst->diagram, *r, inst->match, Direction::Fwd);
        REQUIRE(after.ins.size() == inst->diagram.ins.size());
        REQUIRE(after.outs.size() == inst->diagram.outs.size());
    }
}

TEST_CASE("normalize collapses the one-generator merge to an endomorphism") {
    Diagram d = concat_ff_on_copies();
    size_t steps = 0;
    Diagram n = normalize(d, normalize_rules(), &steps);
    REQUIRE(steps == 1);
    REQUIRE(n.count_kind(BoxKind::Learnable) == 1);
    REQUIRE(n.count_kind(BoxKind::Copy) == 0);
    REQUIRE(n.boxes.size() == 1);
}

TEST_CASE("normalize is a fixed point on an already-normal diagram") {
    Builder bl;
    Val x = bl.input(SD);
    bl.output(bl.add1(learnable_box("e", {SD}, {SD}), {x}));
    Diagram d = bl.finish();
    Diagram n = normalize(d, normalize_rules());
    REQUIRE(canonicalize(n) == canonicalize(d));
}

TEST_CASE("normalize fuses a chain of two learnables") {
    Builder bl;
    Val x = bl.input(SD);
    Val y = bl.add1(learnable_box("f", {SD}, {SD}), {x});
    bl.output(bl.add1(learnable_box("g", {SD}, {SD}), {y}));
    Diagram n = normalize(bl.finish(), normalize_rules());
    REQUIRE(n.count_kind(BoxKind::Learnable) == 1);
}

TEST_CASE("concat-absorb strictly decreases the learnable count") {
    Builder bl;
    Val x = bl.input(SD);
    Val y = bl.input(SD);
    Val fy = bl.add1(learnable_box("f", {SD}, {SD}), {y});
    Val cc = bl.add1(concat_box(SD, SD), {x, fy});
    bl.output(bl.add1(learnable_box("C", {cc.shape}, {SD}), {cc}));
    Diagram d = bl.finish();
    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("concat-absorb");
    auto ms = match_pattern(d, *r);
    REQUIRE(ms.size() == 1);
    Diagram after = apply_rule(d, *r, ms.front(), Direction::Fwd);
    REQUIRE(after.count_kind(BoxKind::Learnable) == d.count_kind(BoxKind::Learnable) - 1);
}

TEST_CASE("equivalent: reflexive, padded variants collapse, distinct stays distinct") {
    RuleSet nr = normalize_rules();
    Diagram d = concat_ff_on_copies();
    REQUIRE(equivalent(d, d, nr));

    Builder bl;
    Val x = bl.input(SD);
    Val e = bl.add1(learnable_box("pre", {SD}, {SD}), {x});
    auto [a, b] = bl.copy(e);
    Val cc = bl.add1(concat_box(SD, SD), {a, b});
    bl.output(bl.add1(learnable_box("C", {cc.shape}, {SD}), {cc}));
    Diagram padded = bl.finish();
    REQUIRE(equivalent(padded, concat_ff_on_copies("C"), nr));

    Diagram different = box_diagram(elementwise("exp", SD));
    REQUIRE_FALSE(equivalent(different, concat_ff_on_copies(), nr));
}

TEST_CASE("replay flags corrupted steps with their index") {
    Diagram d = concat_ff_on_copies();
    Derivation der;
    der.name = "demo";
    der.start = d;
    der.steps.push_back({"copy-concat-collapse", "bogus-locator", Direction::Fwd});
    Trace tr = replay(der, builtin_rules());
    REQUIRE_FALSE(tr.ok);
    REQUIRE(tr.failed_at == 0);
}

TEST_CASE("replay certifies semantic steps numerically") {
    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("contract-assoc");
    auto inst = r->random_instance(0);
    REQUIRE(inst);
    Derivation der;
    der.name = "assoc";
    der.start = inst->diagram;
    der.steps.push_back({"contract-assoc", inst->match.locator, Direction::Fwd});
    Trace tr = replay(der, rs);
    REQUIRE(tr.ok);
    REQUIRE(tr.steps[0].applied);
    REQUIRE(tr.steps[0].cert_rel_err <= 1e-6);
}

// ---- witnesses ---------------------------------------------------------------

namespace {

double witness_err(const Diagram& lhs, const Diagram& rhs, const ParamStore& pl,
                   const ParamStore& pr, const Binding& bind, uint64_t seed, int n_inputs = 50) {
    double worst = 0;
    for (int k = 0; k < n_inputs; ++k) {
        CounterRng rng(seed + static_cast<uint64_t>(k), "wit");
        std::vector<TensorValue> ins;
        for (const auto& s : lhs.ins) {
            TensorValue t(s.resolve(bind));
            for (auto& v : t.data) v = rng.next_uniform(-1, 1);
            ins.push_back(std::move(t));
        }
        auto o1 = eval(lhs, bind, pl, ins);
        auto o2 = eval(rhs, bind, pr, ins);
        worst = std::max(worst, rel_err(o1, o2));
    }
    return worst;
}

}  // namespace

TEST_CASE("copy-concat-collapse witness reproduces the merge exactly") {
    Binding bind{{"s", 5}, {"d", 4}};
    Diagram lhs = concat_ff_on_copies();
    ParamStore pl = instantiate_params<double>(lhs, bind, 0xA77E);
    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("copy-concat-collapse");
    auto ms = match_pattern(lhs, *r);
    REQUIRE(ms.size() == 1);
    Diagram rhs = apply_rule(lhs, *r, ms.front(), Direction::Fwd);
    auto pr = r->witness(lhs, ms.front(), pl);
    REQUIRE(pr);
    REQUIRE(witness_err(lhs, rhs, pl, *pr, bind, 1) <= 1e-6);
}

TEST_CASE("concat-absorb witness: general case and identity pre-box") {
    Binding bind{{"s", 4}, {"d", 3}};
    Builder bl;
    Val x = bl.input(SD);
    Val y = bl.input(SD);
    Val fy = bl.add1(learnable_box("f", {SD}, {SD}), {y});
    Val cc = bl.add1(concat_box(SD, fy.shape), {x, fy});
    bl.output(bl.add1(learnable_box("C", {cc.shape}, {SD}), {cc}));
    Diagram lhs = bl.finish();
    ParamStore pl = instantiate_params<double>(lhs, bind, 0xA77E);

    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("concat-absorb");
    auto ms = match_pattern(lhs, *r);
    REQUIRE(ms.size() == 1);
    Diagram rhs = apply_rule(lhs, *r, ms.front(), Direction::Fwd);
    auto pr = r->witness(lhs, ms.front(), pl);
    REQUIRE(pr);
    REQUIRE(witness_err(lhs, rhs, pl, *pr, bind, 2) <= 1e-6);

    // identity-initialised pre-box: parameters carry over unchanged
    ParamStore pid = pl;
    pid.entries.at("f").mlp.layers.clear();
    auto pr2 = r->witness(lhs, ms.front(), pid);
    REQUIRE(pr2);
    const auto& moved = pr2->entries.begin()->second.mlp;
    const auto& orig = pl.entries.at("C").mlp;
    REQUIRE(moved.layers.size() == orig.layers.size());
    for (size_t li = 0; li < moved.layers.size(); ++li)
        REQUIRE(moved.layers[li].W.data == orig.layers[li].W.data);
}

TEST_CASE("ua-fusion witness composes exactly") {
    Binding bind{{"s", 4}, {"d", 5}};
    Builder bl;
    Val x = bl.input(SD);
    Val y = bl.add1(learnable_box("f", {SD}, {SD}), {x});
    bl.output(bl.add1(learnable_box("g", {SD}, {SD}), {y}));
    Diagram lhs = bl.finish();
    ParamStore pl = instantiate_params<double>(lhs, bind, 0xA77E);
    RuleSet rs = builtin_rules();
    const RewriteRule* r = rs.by_name("ua-fusion");
    auto ms = match_pattern(lhs, *r);
    REQUIRE(ms.size() == 1);
    Diagram rhs = apply_rule(lhs, *r, ms.front(), Direction::Fwd);
    auto pr = r->witness(lhs, ms.front(), pl);
    REQUIRE(pr);
    REQUIRE(witness_err(lhs, rhs, pl, *pr, bind, 3) <= 1e-6);
}

TEST_CASE("witness soundness over 50 random inputs per instance") {
    Binding bind{{"s", 3}, {"d", 4}};
    RuleSet rs = builtin_rules();
    for (const char* name : {"copy-concat-collapse", "concat-absorb", "ua-fusion"}) {
        const RewriteRule* r = rs.by_name(name);
        Diagram lhs;
        if (std::string(name) == "concat-absorb") {
            Builder bl;
            Val x = bl.input(SD);
            Val y = bl.input(SD);
            Val fy = bl.add1(learnable_box("f", {SD}, {SD}), {y});
            Val cc = bl.add1(concat_box(SD, fy.shape), {x, fy});
            bl.output(bl.add1(learnable_box("C", {cc.shape}, {SD}), {cc}));
            lhs = bl.finish();
        } else if (std::string(name) == "ua-fusion") {
            Builder bl;
            Val x = bl.input(SD);
            Val y = bl.add1(learnable_box("f", {SD}, {SD}), {x});
            bl.output(bl.add1(learnable_box("g", {SD}, {SD}), {y}));
            lhs = bl.finish();
        } else {
            lhs = concat_ff_on_copies();
        }
        ParamStore pl = instantiate_params<double>(lhs, bind, 0xA77E);
        auto ms = match_pattern(lhs, *r);
        REQUIRE_FALSE(ms.empty());
        Diagram rhs = apply_rule(lhs, *r, ms.front(), Direction::Fwd);
        auto pr = r->witness(lhs, ms.front(), pl);
        REQUIRE(pr);
        INFO("witness " << name);
        REQUIRE(witness_err(lhs, rhs, pl, *pr, bind, fnv1a(name), 50) <= 1e-6);
    }
}

// ---- property tests -------------------------------------------------------------

namespace {

// Random valid diagram generator: type-correct chains of unary/binary boxes
// over [s, d] wires with copies.
Diagram random_diagram(uint64_t seed, size_t max_boxes = 12) {
    CounterRng rng(seed, "randdiag");
    Builder bl;
    std::vector<Val> pool;
    size_t n_in = 1 + rng.next_below(3);
    for (size_t i = 0; i < n_in; ++i) pool.push_back(bl.input(SD));
    size_t boxes = 1 + rng.next_below(max_boxes);
    int ua_counter = 0;
    for (size_t i = 0; i < boxes && !pool.empty(); ++i) {
        size_t pick = rng.next_below(pool.size());
        Val v = pool[pick];
        pool.erase(pool.begin() + static_cast<ptrdiff_t>(pick));
        switch (rng.next_below(6)) {
            case 0: {
                auto [a, b] = bl.copy(v);
                pool.push_back(a);
                pool.push_back(b);
                break;
            }
            case 1:
                pool.push_back(bl.add1(elementwise("exp", SD), {v}));
                break;
            case 2:
                pool.push_back(
                    bl.add1(learnable_box("u" + std::to_string(ua_counter++), {SD}, {SD}), {v}));
                break;
            case 3: {
                if (pool.empty()) {
                    pool.push_back(bl.add1(elementwise("phi", SD), {v}));
                    break;
                }
                size_t j = rng.next_below(pool.size());
                Val w = pool[j];
                pool.erase(pool.begin() + static_cast<ptrdiff_t>(j));
                pool.push_back(bl.add1(add_box(SD, SD), {v, w}));
                break;
            }
            case 4: {
                if (pool.empty()) {
                    pool.push_back(bl.add1(elementwise("phi", SD), {v}));
                    break;
                }
                size_t j = rng.next_below(pool.size());
                Val w = pool[j];
                pool.erase(pool.begin() + static_cast<ptrdiff_t>(j));
                Val cc = bl.add1(concat_box(SD, SD), {v, w});
                pool.push_back(
                    bl.add1(learnable_box("u" + std::to_string(ua_counter++), {cc.shape}, {SD}), {cc}));
                break;
            }
            default:
                pool.push_back(bl.add1(reverse_box(SD, 0), {v}));
                break;
        }
    }
    for (auto& v : pool) bl.output(v);
    return bl.finish();
}

}  // namespace

TEST_CASE("1000 random diagrams stay valid under composition") {
    size_t built = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        Diagram d = random_diagram(seed);
        REQUIRE(validate(d).ok());
        Diagram p = compose_par(d, identity({SD}));
        REQUIRE(validate(p).ok());
        Diagram s = compose_seq(d, identity(d.outs));
        REQUIRE(validate(s).ok());
        ++built;
    }
    REQUIRE(built == 1000);
}

TEST_CASE("normalization is order independent on 500 random diagrams") {
    RuleSet nr = normalize_rules();
    RuleSet rev = nr;
    std::reverse(rev.rules.begin(), rev.rules.end());
    for (uint64_t seed = 0; seed < 500; ++seed) {
        Diagram d = random_diagram(seed * 7 + 1);
        Diagram n1 = normalize(d, nr);
        Diagram n2 = normalize(d, rev);
        INFO("seed " << seed);
        REQUIRE(canonicalize(n1) == canonicalize(n2));
    }
}

TEST_CASE("canonical codes are stable across print/parse on random diagrams") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        Diagram d = random_diagram(seed * 13 + 5);
        Diagram p = parse_diagram(print_diagram(d));
        REQUIRE(canonicalize(p) == canonicalize(d));
    }
}

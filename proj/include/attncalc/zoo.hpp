// SPDX-License-Identifier: Apache-2.0
//
// Exhaustive enumeration of attention mechanisms over the five generators,
// the sequential-composite prune, and rewrite-based deduplication into the
// model catalog.
//
// A model is a plan: a list of generator instances whose inputs are either
// the (arbitrarily copied) raw stream or earlier generators' outputs, with
// a single dangling SeqD output and every other wire consumed. Plans are
// materialized into flat diagrams, deduplicated by canonical code during
// the search, pruned, then grouped into equivalence classes by normal-form
// canonical codes.

#pragma once

#include <atomic>
#include <thread>

#include "attncalc/engine.hpp"
#include "attncalc/generators.hpp"
#include "attncalc/rules.hpp"
#include "attncalc/serialize.hpp"

namespace attncalc::zoo {

enum class SourcePolicy { Any, InputOnly };
enum class PruneMode { CutWire, UpstreamComplete };

// Defaults below are the calibrated configuration that reproduces the
// 14-class catalog: attention matrices and value streams are prepared from
// the raw input, merges are unrestricted, and prepared patterns may be
// applied several times (fan-out).
struct EnumOptions {
    int max_gens = 5;
    bool seqd_fanout = true;
    bool attmat_fanout = true;
    bool linstate_fanout = true;
    SourcePolicy prep_sources = SourcePolicy::InputOnly;
    SourcePolicy merge_sources = SourcePolicy::Any;
    SourcePolicy value_sources = SourcePolicy::InputOnly;
    int workers = 1;

    std::string str() const {
        auto pol = [](SourcePolicy p) { return p == SourcePolicy::Any ? "any" : "input"; };
        std::string s = "max_gens=" + std::to_string(max_gens);
        s += std::string(" seqd_fanout=") + (seqd_fanout ? "1" : "0");
        s += std::string(" attmat_fanout=") + (attmat_fanout ? "1" : "0");
        s += std::string(" linstate_fanout=") + (linstate_fanout ? "1" : "0");
        s += std::string(" prep=") + pol(prep_sources);
        s += std::string(" merge=") + pol(merge_sources);
        s += std::string(" value=") + pol(value_sources);
        return s;
    }
};

struct DedupOptions {
    bool parallel_ua_merge = true;   // merge parallel learnables over the same values
    bool drop_endo = false;          // specialize learnable endomorphisms to the identity
    bool sort_concat_args = false;   // quotient ua-fed concat argument order in class keys

    std::string str() const {
        return std::string("parallel_ua_merge=") + (parallel_ua_merge ? "1" : "0") +
               " drop_endo=" + (drop_endo ? "1" : "0") +
               " sort_concat_args=" + (sort_concat_args ? "1" : "0");
    }
};

// ---- plans -------------------------------------------------------------------

struct GenInst {
    GenKind kind;
    std::vector<int> srcs;  // -1 = raw input stream, else index of an earlier instance
};

struct Plan {
    std::vector<GenInst> gens;
    int root = -1;  // index of the instance whose output is the model output
};

inline Sort out_sort(GenKind k) {
    for (const auto& g : generators())
        if (g.kind == k) return g.out;
    throw std::logic_error("unknown generator");
}
inline const Generator& gen_info(GenKind k) {
    for (const auto& g : generators())
        if (g.kind == k) return g;
    throw std::logic_error("unknown generator");
}

// Materialize a plan into a flat diagram (copy trees for fan-out).
inline Diagram materialize(const Plan& plan, const SortShapes& ss = {}) {
    Builder bl;
    Val x = bl.input(ss.seqd());
    // consumer counts
    size_t input_uses = 0;
    std::vector<size_t> uses(plan.gens.size(), 0);
    for (const auto& g : plan.gens)
        for (int s : g.srcs) {
            if (s < 0)
                ++input_uses;
            else
                ++uses[static_cast<size_t>(s)];
        }
    std::vector<Val> input_copies = bl.copies(x, std::max<size_t>(1, input_uses));
    size_t input_next = 0;
    std::vector<std::vector<Val>> outputs(plan.gens.size());
    std::vector<size_t> out_next(plan.gens.size(), 0);
    std::vector<Val> produced(plan.gens.size(), Val{});
    for (size_t i = 0; i < plan.gens.size(); ++i) {
        const GenInst& g = plan.gens[i];
        std::vector<Val> ins;
        for (int s : g.srcs) {
            if (s < 0) {
                ins.push_back(input_copies[input_next++]);
            } else {
                ins.push_back(outputs[static_cast<size_t>(s)][out_next[static_cast<size_t>(s)]++]);
            }
        }
        Val out = emit_generator(bl, g.kind, "m" + std::to_string(i), ins, ss);
        produced[i] = out;
        outputs[i] = bl.copies(out, std::max<size_t>(1, uses[i] + (plan.root == static_cast<int>(i))));
    }
    if (input_uses == 0) bl.del(input_copies[0]);
    if (plan.root >= 0) {
        size_t r = static_cast<size_t>(plan.root);
        bl.output(outputs[r][out_next[r]]);
    }
    return bl.finish();
}

// Partial-state key: all dangling outputs deleted (an unordered set in the
// canonical code), so plans that build the same graph in different orders
// collide in the memo.
inline CanonicalCode partial_key(const Plan& plan, const SortShapes& ss = {}) {
    Builder bl;
    Val x = bl.input(ss.seqd());
    size_t input_uses = 0;
    std::vector<size_t> uses(plan.gens.size(), 0);
    for (const auto& g : plan.gens)
        for (int s : g.srcs) {
            if (s < 0)
                ++input_uses;
            else
                ++uses[static_cast<size_t>(s)];
        }
    std::vector<Val> input_copies = bl.copies(x, input_uses + 1);
    size_t input_next = 0;
    std::vector<std::vector<Val>> outputs(plan.gens.size());
    std::vector<size_t> out_next(plan.gens.size(), 0);
    for (size_t i = 0; i < plan.gens.size(); ++i) {
        const GenInst& g = plan.gens[i];
        std::vector<Val> ins;
        for (int s : g.srcs) {
            if (s < 0)
                ins.push_back(input_copies[input_next++]);
            else
                ins.push_back(outputs[static_cast<size_t>(s)][out_next[static_cast<size_t>(s)]++]);
        }
        Val out = emit_generator(bl, g.kind, "m" + std::to_string(i), ins, ss);
        outputs[i] = bl.copies(out, uses[i] + 1);
    }
    bl.del(input_copies[input_uses]);  // spare input leg
    for (size_t i = 0; i < plan.gens.size(); ++i) bl.del(outputs[i][out_next[i]]);
    // no boundary output: every dangling value is delete-marked
    return canonicalize(bl.finish());
}

// ---- enumeration ----------------------------------------------------------------

namespace enumdetail {

struct Consumption {
    std::vector<int> count;  // uses per instance
};

inline bool fanout_allowed(const EnumOptions& opt, Sort s) {
    switch (s) {
        case Sort::SeqD: return opt.seqd_fanout;
        case Sort::AttMat: return opt.attmat_fanout;
        case Sort::LinState: return opt.linstate_fanout;
    }
    return true;
}

inline SourcePolicy policy_for(const EnumOptions& opt, GenKind k, size_t port) {
    switch (k) {
        case GenKind::ConcatFF: return opt.merge_sources;
        case GenKind::AttPrep:
        case GenKind::LinAttPrep: return opt.prep_sources;
        case GenKind::AttApply:
        case GenKind::LinAttApply:
            return port == 1 ? opt.value_sources : SourcePolicy::Any;
    }
    return SourcePolicy::Any;
}

struct Search {
    const EnumOptions& opt;
    std::set<CanonicalCode> seen_states;
    std::map<CanonicalCode, Plan> models;
    SortShapes ss;

    explicit Search(const EnumOptions& o) : opt(o) {}

    void maybe_record(const Plan& plan, const std::vector<int>& uses) {
        // complete: exactly one unconsumed output, of SeqD sort
        int dangling = -1;
        for (size_t i = 0; i < plan.gens.size(); ++i) {
            if (uses[i] > 0) continue;
            if (dangling >= 0) return;
            dangling = static_cast<int>(i);
        }
        if (dangling < 0) return;
        if (out_sort(plan.gens[static_cast<size_t>(dangling)].kind) != Sort::SeqD) return;
        Plan done = plan;
        done.root = dangling;
        Diagram d = materialize(done, ss);
        CanonicalCode code = canonicalize(d);
        models.emplace(std::move(code), std::move(done));
    }

    void dfs(Plan& plan, std::vector<int>& uses) {
        maybe_record(plan, uses);
        if (static_cast<int>(plan.gens.size()) >= opt.max_gens) return;
        // candidate sources per sort
        for (const auto& g : generators()) {
            std::vector<std::vector<int>> choices(g.ins.size());
            for (size_t port = 0; port < g.ins.size(); ++port) {
                SourcePolicy pol = policy_for(opt, g.kind, port);
                if (g.ins[port] == Sort::SeqD) choices[port].push_back(-1);
                if (pol == SourcePolicy::Any) {
                    for (size_t i = 0; i < plan.gens.size(); ++i) {
                        Sort os = out_sort(plan.gens[i].kind);
                        if (os != g.ins[port]) continue;
                        if (uses[i] > 0 && !fanout_allowed(opt, os)) continue;
                        choices[port].push_back(static_cast<int>(i));
                    }
                }
                if (choices[port].empty()) goto next_gen;
            }
            {
                std::vector<size_t> idx(choices.size(), 0);
                while (true) {
                    GenInst inst{g.kind, {}};
                    for (size_t port = 0; port < choices.size(); ++port)
                        inst.srcs.push_back(choices[port][idx[port]]);
                    // fan-out check when the same source feeds two ports
                    bool ok = true;
                    std::map<int, int> local;
                    for (int s : inst.srcs)
                        if (s >= 0) local[s]++;
                    for (const auto& [s, n] : local) {
                        Sort os = out_sort(plan.gens[static_cast<size_t>(s)].kind);
                        if ((uses[static_cast<size_t>(s)] + n) > 1 && !fanout_allowed(opt, os))
                            ok = false;
                    }
                    if (ok) {
                        plan.gens.push_back(inst);
                        for (int s : inst.srcs)
                            if (s >= 0) uses[static_cast<size_t>(s)]++;
                        uses.push_back(0);
                        CanonicalCode key = partial_key(plan, ss);
                        if (seen_states.insert(key).second) dfs(plan, uses);
                        uses.pop_back();
                        for (int s : inst.srcs)
                            if (s >= 0) uses[static_cast<size_t>(s)]--;
                        plan.gens.pop_back();
                    }
                    // advance
                    size_t k = 0;
                    while (k < idx.size()) {
                        if (++idx[k] < choices[k].size()) break;
                        idx[k] = 0;
                        ++k;
                    }
                    if (k == idx.size()) break;
                }
            }
        next_gen:;
        }
    }
};

}  // namespace enumdetail

struct EnumeratedModel {
    Plan plan;
    Diagram diagram;
    CanonicalCode code;
    std::map<std::string, int> gen_multiset;
};

inline std::map<std::string, int> multiset_of(const Plan& plan) {
    std::map<std::string, int> m;
    for (const auto& g : plan.gens) m[gen_info(g.kind).name]++;
    return m;
}

// Every type-valid model with at most max_gens generators, deduplicated by
// canonical code, in deterministic (code) order.
inline std::vector<EnumeratedModel> enumerate_models(const EnumOptions& opt) {
    std::map<CanonicalCode, Plan> merged;
    int workers = std::max(1, opt.workers);
    if (workers == 1) {
        enumdetail::Search s(opt);
        Plan plan;
        std::vector<int> uses;
        s.dfs(plan, uses);
        merged = std::move(s.models);
    } else {
        // split the first generator choice across workers, merge by code
        const auto& gens = generators();
        std::vector<std::map<CanonicalCode, Plan>> results(gens.size());
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= gens.size()) return;
                enumdetail::Search s(opt);
                Plan plan;
                std::vector<int> uses;
                // seed with one specific first generator (inputs all raw)
                GenInst first{gens[i].kind, {}};
                bool ok = true;
                for (Sort in : gens[i].ins) {
                    if (in != Sort::SeqD) ok = false;
                    first.srcs.push_back(-1);
                }
                if (!ok) continue;
                plan.gens.push_back(first);
                uses.push_back(0);
                s.seen_states.insert(partial_key(plan, s.ss));
                s.dfs(plan, uses);
                results[i] = std::move(s.models);
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        for (auto& r : results)
            for (auto& [code, plan] : r) merged.emplace(code, plan);
    }
    std::vector<EnumeratedModel> out;
    for (auto& [code, plan] : merged) {
        EnumeratedModel m;
        m.plan = plan;
        m.diagram = materialize(plan);
        m.code = code;
        m.gen_multiset = multiset_of(plan);
        out.push_back(std::move(m));
    }
    return out;  // map order = deterministic code order
}

// ---- sequential prune -------------------------------------------------------------

// A model is a sequential composite when some generator's SeqD output w
// splits it: everything downstream of w consumes neither the raw input nor
// any upstream wire other than w.
inline bool is_sequential_composite(const Plan& plan, PruneMode mode) {
    size_t n = plan.gens.size();
    for (size_t g = 0; g < n; ++g) {
        if (out_sort(plan.gens[g].kind) != Sort::SeqD) continue;
        if (static_cast<int>(g) == plan.root) continue;
        // ancestors of g (inclusive)
        std::vector<bool> up(n, false);
        up[g] = true;
        bool grew = true;
        while (grew) {
            grew = false;
            for (size_t i = 0; i < n; ++i) {
                if (!up[i]) continue;
                for (int s : plan.gens[i].srcs)
                    if (s >= 0 && !up[static_cast<size_t>(s)]) {
                        up[static_cast<size_t>(s)] = true;
                        grew = true;
                    }
            }
        }
        bool ok = true;
        for (size_t i = 0; i < n && ok; ++i) {
            if (up[i]) continue;  // downstream side
            for (int s : plan.gens[i].srcs) {
                if (s < 0) {
                    if (mode == PruneMode::CutWire) ok = false;  // raw input crosses the cut
                } else if (up[static_cast<size_t>(s)] && s != static_cast<int>(g)) {
                    ok = false;  // another upstream wire crosses
                }
            }
        }
        if (ok) return true;
    }
    return false;
}

inline std::vector<EnumeratedModel> prune_sequential(std::vector<EnumeratedModel> models,
                                                     PruneMode mode = PruneMode::CutWire) {
    std::vector<EnumeratedModel> out;
    for (auto& m : models)
        if (!is_sequential_composite(m.plan, mode)) out.push_back(std::move(m));
    return out;
}

// ---- deduplication ----------------------------------------------------------------

inline RuleSet dedup_ruleset(const DedupOptions& opt) {
    RuleSet all = builtin_rules();
    RuleSet rs;
    for (const auto& r : all.rules)
        if (r->name() == "copy-concat-collapse" || r->name() == "concat-absorb" ||
            r->name() == "ua-fusion" || r->name() == "concat-flatten")
            rs.rules.push_back(r);
    if (opt.drop_endo)
        for (const auto& r : all.rules)
            if (r->name() == "ua-drop") rs.rules.push_back(r);
    for (const auto& r : all.rules)
        if (r->name() == "fuse-through-copy") rs.rules.push_back(r);
    if (opt.parallel_ua_merge) {
        for (const auto& r : all.rules)
            if (r->name() == "cse-merge") rs.rules.push_back(r);
        rs.rules.push_back(std::make_shared<rules::CseMerge>("parallel-ua-merge",
                                                             RuleKind::Expressivity, false));
    }
    return rs;
}

// Canonical code of the backwards closure of a value (used to order concat
// arguments in class keys).
inline CanonicalCode value_closure_code(const Diagram& d, End v) {
    std::set<BoxId> anc;
    std::set<uint32_t> used_ins;
    std::vector<End> stack{v};
    while (!stack.empty()) {
        End e = stack.back();
        stack.pop_back();
        if (e.boundary()) {
            used_ins.insert(e.port);
            continue;
        }
        BoxId b = static_cast<BoxId>(e.box);
        if (!anc.insert(b).second) continue;
        const Box& bx = d.box(b);
        for (uint32_t p = 0; p < bx.ins.size(); ++p)
            stack.push_back(rules::source_of(d, port_of(b, p)));
    }
    Diagram c;
    std::map<uint32_t, uint32_t> inmap;
    for (uint32_t i : used_ins) {
        inmap[i] = static_cast<uint32_t>(c.ins.size());
        c.ins.push_back(d.ins[i]);
    }
    std::map<BoxId, BoxId> idmap;
    for (BoxId b : anc) idmap[b] = c.add_box(d.box(b));
    auto remap = [&](End e) {
        if (e.boundary()) return End{kBoundary, inmap.at(e.port)};
        return End{static_cast<int32_t>(idmap.at(static_cast<BoxId>(e.box))), e.port};
    };
    for (const auto& w : d.wires) {
        if (w.dst.boundary() || !anc.count(static_cast<BoxId>(w.dst.box))) continue;
        c.connect(remap(w.src), remap(w.dst), w.shape);
    }
    // unconsumed producer ports inside the closure get deletes; v becomes the output
    for (BoxId b : anc) {
        const Box& bx = d.box(b);
        for (uint32_t p = 0; p < bx.outs.size(); ++p) {
            End e = port_of(b, p);
            if (e == v) continue;
            const Wire* w = d.wire_from(e);
            bool internal = w && !w->dst.boundary() && anc.count(static_cast<BoxId>(w->dst.box));
            if (!internal) {
                BoxId dl = c.add_box(delete_box(bx.outs[p]));
                c.connect(remap(e), port_of(dl, 0), bx.outs[p]);
            }
        }
    }
    Shape vshape = v.boundary() ? d.ins[v.port]
                                : d.box(static_cast<BoxId>(v.box)).outs[v.port];
    c.outs.push_back(vshape);
    c.connect(remap(v), bout(0), vshape);
    return canonicalize(c);
}

// Quotient representative for concat-argument order: arguments of a concat
// feeding a learnable box are permuted into a canonical order (by upstream
// closure code). The consuming box can absorb any permutation, so class
// keys ignore the order.
inline Diagram sort_concat_arguments(const Diagram& d) {
    Diagram out = d;
    for (BoxId id : out.topo_order()) {
        if (!out.has_box(id)) continue;
        const Box& b = out.box(id);
        if (b.kind != BoxKind::Primitive || b.op != "concat") continue;
        const Wire* w = out.wire_from(port_of(id, 0));
        if (!w || w->dst.boundary()) continue;
        const Box& u = out.box(static_cast<BoxId>(w->dst.box));
        if (u.kind != BoxKind::Learnable || u.ins.size() != 1) continue;
        std::vector<std::pair<CanonicalCode, uint32_t>> order;
        for (uint32_t p = 0; p < b.ins.size(); ++p)
            order.push_back({value_closure_code(out, rules::source_of(out, port_of(id, p))), p});
        std::stable_sort(order.begin(), order.end());
        bool same = true;
        for (uint32_t p = 0; p < order.size(); ++p) same &= order[p].second == p;
        if (same) continue;
        std::vector<End> srcs(b.ins.size());
        std::vector<Shape> shapes(b.ins.size());
        for (uint32_t p = 0; p < b.ins.size(); ++p) {
            srcs[p] = rules::source_of(out, port_of(id, p));
            shapes[p] = b.ins[p];
        }
        Box nb = out.boxes.at(id);
        for (uint32_t p = 0; p < b.ins.size(); ++p) out.drop_wire_to(port_of(id, p));
        for (uint32_t p = 0; p < order.size(); ++p) {
            nb.ins[p] = shapes[order[p].second];
            out.connect(srcs[order[p].second], port_of(id, p), shapes[order[p].second]);
        }
        out.boxes.at(id) = nb;
    }
    return out;
}

struct CatalogEntry {
    std::string id;
    Diagram diagram;
    Plan plan;
    std::map<std::string, int> gen_multiset;
    CanonicalCode code;         // of the representative diagram
    CanonicalCode normal_code;  // of its normal form (the class key)
};

struct Catalog {
    std::vector<CatalogEntry> models;
    std::string enum_config;
    std::string dedup_config;
    std::string rules_version = "attncalc-rules/1";
};

inline size_t gen_count(const Plan& p) { return p.gens.size(); }

// Group by normal-form code; representative = fewest generators, ties by
// canonical code. M0/M1 are pinned to the linear and dot-product pairs.
inline Catalog dedupe(const std::vector<EnumeratedModel>& models, const DedupOptions& dopt,
                      const EnumOptions& eopt) {
    RuleSet rs = dedup_ruleset(dopt);
    auto class_key = [&](const Diagram& d) {
        Diagram n = normalize(d, rs);
        if (dopt.sort_concat_args) n = sort_concat_arguments(n);
        return canonicalize(n);
    };
    struct Class {
        const EnumeratedModel* rep = nullptr;
    };
    std::map<CanonicalCode, Class> classes;
    std::map<const EnumeratedModel*, CanonicalCode> normal_codes;
    for (const auto& m : models) {
        CanonicalCode ncode = class_key(m.diagram);
        normal_codes[&m] = ncode;
        Class& c = classes[ncode];
        if (!c.rep || gen_count(m.plan) < gen_count(c.rep->plan) ||
            (gen_count(m.plan) == gen_count(c.rep->plan) && m.code < c.rep->code))
            c.rep = &m;
    }

    CanonicalCode m0_code = class_key(reference_linear_attention());
    CanonicalCode m1_code = class_key(reference_dot_attention());

    std::vector<std::pair<CanonicalCode, const EnumeratedModel*>> ordered;
    for (const auto& [ncode, c] : classes) ordered.push_back({ncode, c.rep});
    std::sort(ordered.begin(), ordered.end(), [&](const auto& a, const auto& b) {
        if (gen_count(a.second->plan) != gen_count(b.second->plan))
            return gen_count(a.second->plan) < gen_count(b.second->plan);
        return a.second->code < b.second->code;
    });

    Catalog cat;
    cat.enum_config = eopt.str();
    cat.dedup_config = dopt.str();
    auto push = [&](const CanonicalCode& ncode, const EnumeratedModel* rep, const std::string& id) {
        CatalogEntry e;
        e.id = id;
        e.diagram = rep->diagram;
        e.plan = rep->plan;
        e.gen_multiset = rep->gen_multiset;
        e.code = rep->code;
        e.normal_code = ncode;
        cat.models.push_back(std::move(e));
    };
    // pinned ids first
    for (const auto& [ncode, rep] : ordered)
        if (ncode == m0_code) push(ncode, rep, "M0");
    for (const auto& [ncode, rep] : ordered)
        if (ncode == m1_code) push(ncode, rep, "M1");
    int next = 2;
    for (const auto& [ncode, rep] : ordered) {
        if (ncode == m0_code || ncode == m1_code) continue;
        push(ncode, rep, "M" + std::to_string(next++));
    }
    return cat;
}

// ---- persistence -------------------------------------------------------------------

inline std::string catalog_file_name(const std::string& id) {
    // M0 -> M00.attn, M13 -> M13.attn
    int n = std::stoi(id.substr(1));
    char buf[16];
    snprintf(buf, sizeof buf, "M%02d.attn", n);
    return buf;
}

inline void write_catalog(const Catalog& cat, const std::string& dir) {
    for (const auto& e : cat.models)
        write_diagram_file(dir + "/" + catalog_file_name(e.id), e.diagram);
    std::ofstream mf(dir + "/manifest.txt");
    if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
    mf << "attncalc-catalog/1\n";
    mf << "rules: " << cat.rules_version << "\n";
    mf << "enum: " << cat.enum_config << "\n";
    mf << "dedup: " << cat.dedup_config << "\n";
    mf << "classes: " << cat.models.size() << "\n";
    for (const auto& e : cat.models) {
        mf << e.id << " file=" << catalog_file_name(e.id) << " code=" << code_digest(e.code)
           << " normal=" << code_digest(e.normal_code) << " gens=";
        bool first = true;
        for (const auto& [name, n] : e.gen_multiset) {
            if (!first) mf << ",";
            first = false;
            mf << name << ":" << n;
        }
        mf << "\n";
    }
}

}  // namespace attncalc::zoo

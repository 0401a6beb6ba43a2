// SPDX-License-Identifier: Apache-2.0
//
// Text serialization of diagrams.
//
// Format (one record per line, UTF-8):
//
//   attncalc/1                          versioned header
//   fixed d_m                           dimension symbol declarations
//   seq s
//   box <id> <kind>{attrs} (<in-shapes>) (<out-shapes>) [{]
//   wire <src-id>.<port> <dst-id>.<port> <shape>
//   in: <shape> <shape> ...             ordered boundary input ports
//   out: <shape> ...                    ordered boundary output ports
//   }                                   closes a simd body block
//
// Box kinds: prim:<op>, ua:<uid>, copy, delete, reverse, reshape,
// contract, simd. A simd box line ends with `{` and is followed by the
// body diagram's records, closed by `}`. Wire endpoints use `$` for the
// boundary: `$.<k>` is boundary input k as a source and boundary output k
// as a destination. Shapes print as `[s, d_m, 64]`; a symbol may carry a
// role (`s^(q)`) and a multiplier (`2*d`).
//
// Attr values: integers (`3`), reals (with `.` or exponent: `1e-05`),
// strings (`'...'`), dimension symbols (`@s`), integer lists (`[1,0]`).

#pragma once

#include <cctype>
#include <fstream>
#include <sstream>

#include "attncalc/diagram.hpp"

namespace attncalc {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

namespace textio {

inline void collect_dims(const Shape& s, std::map<std::string, DimKind>& out) {
    for (const auto& d : s.dims)
        if (d.kind != DimKind::Lit) out.emplace(d.name, d.kind);
}

inline void collect_dims(const Diagram& d, std::map<std::string, DimKind>& out) {
    for (const auto& s : d.ins) collect_dims(s, out);
    for (const auto& s : d.outs) collect_dims(s, out);
    for (const auto& [id, b] : d.boxes) {
        for (const auto& s : b.ins) collect_dims(s, out);
        for (const auto& s : b.outs) collect_dims(s, out);
        for (const auto& [k, a] : b.attrs)
            if (auto* ds = std::get_if<DimSym>(&a))
                if (ds->kind != DimKind::Lit) out.emplace(ds->name, ds->kind);
        if (b.body) collect_dims(*b.body, out);
    }
}

inline std::string attr_value_str(const Attr& a) {
    struct V {
        std::string operator()(int64_t v) const { return std::to_string(v); }
        std::string operator()(double v) const {
            std::ostringstream os;
            os.precision(17);
            os << v;
            std::string s = os.str();
            if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
                s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
                s += ".0";
            return s;
        }
        std::string operator()(const std::string& v) const { return "'" + v + "'"; }
        std::string operator()(const DimSym& v) const { return "@" + v.str(); }
        std::string operator()(const std::vector<int64_t>& v) const {
            std::string s = "[";
            for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
            return s + "]";
        }
    };
    return std::visit(V{}, a);
}

inline std::string kind_spec(const Box& b) {
    std::string s;
    switch (b.kind) {
        case BoxKind::Primitive: s = "prim:" + b.op; break;
        case BoxKind::Learnable: s = "ua:" + b.op; break;
        default: s = box_kind_name(b.kind);
    }
    if (!b.attrs.empty()) {
        s += "{";
        bool first = true;
        for (const auto& [k, v] : b.attrs) {
            if (!first) s += ",";
            first = false;
            s += k + "=" + attr_value_str(v);
        }
        s += "}";
    }
    return s;
}

inline std::string end_str(const End& e) {
    if (e.boundary()) return "$." + std::to_string(e.port);
    return "b" + std::to_string(e.box) + "." + std::to_string(e.port);
}

inline void print_body(const Diagram& d, std::ostream& os, int indent) {
    std::string pad(static_cast<size_t>(indent) * 2, ' ');
    for (const auto& [id, b] : d.boxes) {
        os << pad << "box b" << id << " " << kind_spec(b) << " (";
        for (size_t i = 0; i < b.ins.size(); ++i) os << (i ? " " : "") << b.ins[i].str();
        os << ") (";
        for (size_t i = 0; i < b.outs.size(); ++i) os << (i ? " " : "") << b.outs[i].str();
        os << ")";
        if (b.kind == BoxKind::Simd) {
            os << " {\n";
            print_body(*b.body, os, indent + 1);
            os << pad << "}";
        }
        os << "\n";
    }
    std::vector<Wire> ws = d.wires;
    std::sort(ws.begin(), ws.end(), [](const Wire& a, const Wire& b) {
        if (!(a.src == b.src)) return a.src < b.src;
        return a.dst < b.dst;
    });
    for (const auto& w : ws)
        os << pad << "wire " << end_str(w.src) << " " << end_str(w.dst) << " " << w.shape.str()
           << "\n";
    os << pad << "in:";
    for (const auto& s : d.ins) os << " " << s.str();
    os << "\n" << pad << "out:";
    for (const auto& s : d.outs) os << " " << s.str();
    os << "\n";
}

}  // namespace textio

inline std::string print_diagram(const Diagram& d) {
    std::ostringstream os;
    os << "attncalc/1\n";
    std::map<std::string, DimKind> dims;
    textio::collect_dims(d, dims);
    for (const auto& [name, kind] : dims)
        os << (kind == DimKind::Fixed ? "fixed " : "seq ") << name << "\n";
    textio::print_body(d, os, 0);
    return os.str();
}

// ---- parsing ---------------------------------------------------------------

namespace textio {

struct Parser {
    std::vector<std::string> lines;
    size_t pos = 0;
    std::map<std::string, DimKind> dims;

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    bool done() const { return pos >= lines.size(); }
    std::string peek() const { return done() ? "" : trim(lines[pos]); }
    std::string next() { return trim(lines[pos++]); }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError("line " + std::to_string(pos + 1) + ": " + msg);
    }

    DimSym parse_dim(std::string tok) const {
        std::string role;
        size_t caret = tok.find("^(");
        if (caret != std::string::npos) {
            if (tok.back() != ')') throw ParseError("bad role in dim: " + tok);
            role = tok.substr(caret + 2, tok.size() - caret - 3);
            tok = tok.substr(0, caret);
        }
        int64_t mult = 1;
        size_t star = tok.find('*');
        if (star != std::string::npos) {
            mult = std::stoll(tok.substr(0, star));
            tok = tok.substr(star + 1);
        }
        if (!tok.empty() && (std::isdigit(static_cast<unsigned char>(tok[0])))) {
            DimSym d = DimSym::of(std::stoll(tok) * mult);
            d.role = role;
            return d;
        }
        auto it = dims.find(tok);
        if (it == dims.end()) throw ParseError("undeclared dimension symbol: " + tok);
        DimSym d = it->second == DimKind::Fixed ? DimSym::fixed(tok) : DimSym::seq(tok);
        d.mult = mult;
        d.role = role;
        return d;
    }

    Shape parse_shape(const std::string& s) const {
        std::string body = trim(s);
        if (body.size() < 2 || body.front() != '[' || body.back() != ']')
            throw ParseError("bad shape: " + s);
        body = body.substr(1, body.size() - 2);
        Shape out;
        std::string tok;
        std::istringstream is(body);
        while (std::getline(is, tok, ',')) {
            tok = trim(tok);
            if (!tok.empty()) out.dims.push_back(parse_dim(tok));
        }
        return out;
    }

    // splits "( [s, d] [s] )" into shape strings
    std::vector<Shape> parse_shape_group(const std::string& s) const {
        std::vector<Shape> out;
        size_t i = 0;
        while (i < s.size()) {
            if (s[i] == '[') {
                size_t j = s.find(']', i);
                if (j == std::string::npos) throw ParseError("unbalanced shape in: " + s);
                out.push_back(parse_shape(s.substr(i, j - i + 1)));
                i = j + 1;
            } else
                ++i;
        }
        return out;
    }

    Attr parse_attr_value(const std::string& v) const {
        if (v.empty()) throw ParseError("empty attr value");
        if (v.front() == '\'') return v.substr(1, v.size() - 2);
        if (v.front() == '@') return parse_dim(v.substr(1));
        if (v.front() == '[') {
            std::vector<int64_t> xs;
            std::istringstream is(v.substr(1, v.size() - 2));
            std::string tok;
            while (std::getline(is, tok, ','))
                if (!trim(tok).empty()) xs.push_back(std::stoll(trim(tok)));
            return xs;
        }
        if (v.find('.') != std::string::npos || v.find('e') != std::string::npos ||
            v.find("inf") != std::string::npos)
            return std::stod(v);
        return static_cast<int64_t>(std::stoll(v));
    }

    End parse_end(const std::string& s) const {
        size_t dot = s.rfind('.');
        if (dot == std::string::npos) throw ParseError("bad wire endpoint: " + s);
        uint32_t port = static_cast<uint32_t>(std::stoul(s.substr(dot + 1)));
        std::string base = s.substr(0, dot);
        if (base == "$") return End{kBoundary, port};
        if (base.size() < 2 || base[0] != 'b') throw ParseError("bad wire endpoint: " + s);
        return End{static_cast<int32_t>(std::stol(base.substr(1))), port};
    }

    Diagram parse_block() {
        Diagram d;
        std::map<BoxId, BoxId> idmap;  // file id -> diagram id
        bool saw_in = false, saw_out = false;
        while (!done()) {
            std::string line = peek();
            if (line == "}") {
                ++pos;
                break;
            }
            ++pos;
            if (line.empty() || line[0] == '#') continue;
            std::istringstream is(line);
            std::string word;
            is >> word;
            if (word == "fixed" || word == "seq") {
                std::string name;
                is >> name;
                dims[name] = word == "fixed" ? DimKind::Fixed : DimKind::Seq;
            } else if (word == "box") {
                std::string idtok, kindtok;
                is >> idtok >> kindtok;
                std::string rest;
                std::getline(is, rest);
                rest = trim(rest);
                bool has_block = false;
                if (!rest.empty() && rest.back() == '{') {
                    has_block = true;
                    rest = trim(rest.substr(0, rest.size() - 1));
                }
                // split "( ... ) ( ... )"
                int depth = 0;
                size_t split = std::string::npos;
                for (size_t i = 0; i < rest.size(); ++i) {
                    if (rest[i] == '(') depth++;
                    if (rest[i] == ')') {
                        depth--;
                        if (depth == 0) {
                            split = i;
                            break;
                        }
                    }
                }
                if (split == std::string::npos) fail("box line missing shape groups");
                Box b;
                std::string ins_str = rest.substr(0, split + 1);
                std::string outs_str = rest.substr(split + 1);
                b.ins = parse_shape_group(ins_str);
                b.outs = parse_shape_group(outs_str);
                // kind spec
                std::string attrs;
                size_t brace = kindtok.find('{');
                if (brace != std::string::npos) {
                    attrs = kindtok.substr(brace + 1, kindtok.size() - brace - 2);
                    kindtok = kindtok.substr(0, brace);
                }
                if (kindtok.rfind("prim:", 0) == 0) {
                    b.kind = BoxKind::Primitive;
                    b.op = kindtok.substr(5);
                } else if (kindtok.rfind("ua:", 0) == 0) {
                    b.kind = BoxKind::Learnable;
                    b.op = kindtok.substr(3);
                } else if (kindtok == "copy") {
                    b.kind = BoxKind::Copy;
                    b.op = "copy";
                } else if (kindtok == "delete") {
                    b.kind = BoxKind::Delete;
                    b.op = "delete";
                } else if (kindtok == "reverse") {
                    b.kind = BoxKind::Reverse;
                    b.op = "reverse";
                } else if (kindtok == "reshape") {
                    b.kind = BoxKind::Reshape;
                    b.op = "reshape";
                } else if (kindtok == "contract") {
                    b.kind = BoxKind::Contract;
                    b.op = "contract";
                } else if (kindtok == "simd") {
                    b.kind = BoxKind::Simd;
                    b.op = "simd";
                } else
                    fail("unknown box kind: " + kindtok);
                if (!attrs.empty()) {
                    // split on commas not inside [ ] or ' '
                    std::vector<std::string> parts;
                    int bd = 0;
                    bool q = false;
                    std::string cur;
                    for (char c : attrs) {
                        if (c == '\'') q = !q;
                        if (c == '[') bd++;
                        if (c == ']') bd--;
                        if (c == ',' && bd == 0 && !q) {
                            parts.push_back(cur);
                            cur.clear();
                        } else
                            cur += c;
                    }
                    if (!cur.empty()) parts.push_back(cur);
                    for (const auto& p : parts) {
                        size_t eq = p.find('=');
                        if (eq == std::string::npos) fail("bad attr: " + p);
                        b.attrs[trim(p.substr(0, eq))] = parse_attr_value(trim(p.substr(eq + 1)));
                    }
                }
                if (has_block) {
                    if (b.kind != BoxKind::Simd) fail("only simd boxes carry a body block");
                    b.body = std::make_shared<Diagram>(parse_block());
                }
                if (idtok.empty() || idtok[0] != 'b') fail("bad box id: " + idtok);
                BoxId want = static_cast<BoxId>(std::stoul(idtok.substr(1)));
                d.boxes.emplace(want, std::move(b));
                d.next_id = std::max(d.next_id, want + 1);
                idmap[want] = want;
            } else if (word == "wire") {
                std::string a, bb;
                is >> a >> bb;
                std::string rest;
                std::getline(is, rest);
                Wire w;
                w.src = parse_end(a);
                w.dst = parse_end(bb);
                w.shape = parse_shape(trim(rest));
                d.wires.push_back(w);
            } else if (word == "in:") {
                std::string rest;
                std::getline(is, rest);
                d.ins = parse_shape_group(rest);
                saw_in = true;
            } else if (word == "out:") {
                std::string rest;
                std::getline(is, rest);
                d.outs = parse_shape_group(rest);
                saw_out = true;
            } else if (word == "attncalc/1") {
                // header, ignore
            } else
                fail("unrecognized record: " + word);
        }
        if (!saw_in || !saw_out) throw ParseError("diagram block missing in:/out: lines");
        return d;
    }
};

}  // namespace textio

inline Diagram parse_diagram(const std::string& text) {
    textio::Parser p;
    std::istringstream is(text);
    std::string line;
    bool header = false;
    while (std::getline(is, line)) p.lines.push_back(line);
    if (!p.lines.empty() && textio::Parser::trim(p.lines[0]) == "attncalc/1") header = true;
    if (!header) throw ParseError("missing attncalc/1 header");
    p.pos = 1;
    return p.parse_block();
}

inline void write_diagram_file(const std::string& path, const Diagram& d) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << print_diagram(d);
}

inline Diagram read_diagram_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_diagram(os.str());
}

}  // namespace attncalc

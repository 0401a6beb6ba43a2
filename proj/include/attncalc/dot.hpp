// SPDX-License-Identifier: Apache-2.0
//
// Graphviz DOT export. One node per box (learnables filled), a dashed
// cluster per simd body, edges labeled with wire shapes.

#pragma once

#include <sstream>

#include "attncalc/diagram.hpp"

namespace attncalc {

namespace dotio {

inline std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

inline std::string node_label(const Box& b) {
    switch (b.kind) {
        case BoxKind::Primitive: return b.op;
        case BoxKind::Learnable: return b.op;
        default: return box_kind_name(b.kind);
    }
}

inline void emit_body(const Diagram& d, std::ostream& os, const std::string& prefix, int& cluster) {
    for (const auto& [id, b] : d.boxes) {
        std::string name = prefix + "b" + std::to_string(id);
        if (b.kind == BoxKind::Simd) {
            int c = cluster++;
            os << "  subgraph cluster_" << c << " {\n";
            os << "    style=dashed; label=\"simd " << esc(b.attr_dim("index").str())
               << (b.simd_residual() ? " (residual)" : "") << "\";\n";
            emit_body(*b.body, os, name + "_", cluster);
            // anchor node so outer edges have a target
            os << "    \"" << name << "\" [shape=point, style=invis];\n";
            os << "  }\n";
        } else {
            os << "  \"" << name << "\" [shape=box, label=\"" << esc(node_label(b)) << "\"";
            if (b.kind == BoxKind::Learnable) os << ", style=filled, fillcolor=lightgray";
            os << "];\n";
        }
    }
    for (const auto& w : d.wires) {
        std::string s = w.src.boundary() ? prefix + "in" + std::to_string(w.src.port)
                                         : prefix + "b" + std::to_string(w.src.box);
        std::string t = w.dst.boundary() ? prefix + "out" + std::to_string(w.dst.port)
                                         : prefix + "b" + std::to_string(w.dst.box);
        os << "  \"" << s << "\" -> \"" << t << "\" [label=\"" << esc(w.shape.str()) << "\"];\n";
    }
    for (uint32_t i = 0; i < d.ins.size(); ++i)
        os << "  \"" << prefix << "in" << i << "\" [shape=plaintext, label=\"in " << i << "\"];\n";
    for (uint32_t i = 0; i < d.outs.size(); ++i)
        os << "  \"" << prefix << "out" << i << "\" [shape=plaintext, label=\"out " << i << "\"];\n";
}

}  // namespace dotio

inline std::string render_dot(const Diagram& d, const std::string& title = "diagram") {
    std::ostringstream os;
    os << "digraph \"" << dotio::esc(title) << "\" {\n";
    os << "  rankdir=LR;\n";
    int cluster = 0;
    dotio::emit_body(d, os, "", cluster);
    os << "}\n";
    return os.str();
}

}  // namespace attncalc

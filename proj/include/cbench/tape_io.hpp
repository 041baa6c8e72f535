// JSON round-trip for tapes and tensors.
#pragma once

#include <json.hpp>

#include "cbench/tape.hpp"

namespace cbench {

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", t.vec()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<std::vector<size_t>>(),
                  j.at("data").get<std::vector<double>>());
}

inline nlohmann::json tape_to_json(const Tape& tape) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TapeNode& n : tape.nodes) {
        nlohmann::json jn;
        jn["op"] = static_cast<int>(n.op);
        jn["a"] = n.a;
        jn["b"] = n.b;
        jn["scalar"] = n.scalar;
        jn["i0"] = n.i0;
        jn["i1"] = n.i1;
        jn["ta"] = n.trans_a;
        jn["tb"] = n.trans_b;
        jn["ids"] = n.ids;
        jn["payload"] = n.payload;
        jn["shape"] = n.shape;
        jn["name"] = n.name;
        nodes.push_back(std::move(jn));
    }
    return {{"nodes", std::move(nodes)}, {"named", tape.named}};
}

inline Tape tape_from_json(const nlohmann::json& j) {
    Tape tape;
    for (const auto& jn : j.at("nodes")) {
        TapeNode n;
        n.op = static_cast<Op>(jn.at("op").get<int>());
        n.a = jn.at("a").get<int>();
        n.b = jn.at("b").get<int>();
        n.scalar = jn.at("scalar").get<double>();
        n.i0 = jn.at("i0").get<size_t>();
        n.i1 = jn.at("i1").get<size_t>();
        n.trans_a = jn.at("ta").get<bool>();
        n.trans_b = jn.at("tb").get<bool>();
        n.ids = jn.at("ids").get<std::vector<int>>();
        n.payload = jn.at("payload").get<std::vector<double>>();
        n.shape = jn.at("shape").get<std::vector<size_t>>();
        n.name = jn.at("name").get<std::string>();
        tape.nodes.push_back(std::move(n));
    }
    tape.named = j.at("named").get<std::map<std::string, int>>();
    return tape;
}

}  // namespace cbench

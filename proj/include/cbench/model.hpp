// Decoder-only toy transformer with a decomposed residual stream. Every
// forward pass is recorded on a tape, so the same code path serves plain
// inference, per-edge patching, and gradient-based attribution. Nodes are
// the embedding, each attention head, each MLP block, and the logits; an
// edge is one source node's additive contribution to one target slot
// (q/k/v for heads, a single input slot for MLPs and logits). Layer norms
// belong to the target and are recomputed under interventions.
#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbench/rng.hpp"
#include "cbench/tape.hpp"
#include "cbench/tape_io.hpp"
#include "cbench/tasks.hpp"

namespace cbench {

// ---------------------------------------------------------------------------
// configuration and graph identifiers
// ---------------------------------------------------------------------------

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_head = 16;
    int d_mlp = 256;
    int vocab_size = 0;
    int max_seq_len = 48;
    uint64_t seed = 0;
    bool layer_norm = true;
    bool gelu_act = true;       // false: identity activation (linear MLP)
    bool tie_embeddings = true; // unembedding = transpose of token embedding

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 ||
            d_mlp < 1 || vocab_size < 1 || max_seq_len < 1)
            throw Error("ModelConfig: all dimensions must be positive");
        if (d_model != n_heads * d_head)
            throw Error("ModelConfig: d_model must equal n_heads * d_head");
    }
};

enum class NodeKind : uint8_t { Embedding, Head, Mlp, Logits };

struct NodeId {
    NodeKind kind = NodeKind::Embedding;
    int layer = -1;
    int head = -1;

    static NodeId embedding() { return {NodeKind::Embedding, -1, -1}; }
    static NodeId attn(int l, int h) { return {NodeKind::Head, l, h}; }
    static NodeId mlp(int l) { return {NodeKind::Mlp, l, -1}; }
    static NodeId logits() { return {NodeKind::Logits, -1, -1}; }

    auto operator<=>(const NodeId&) const = default;

    std::string str() const {
        switch (kind) {
            case NodeKind::Embedding: return "emb";
            case NodeKind::Head:
                return "a" + std::to_string(layer) + ".h" +
                       std::to_string(head);
            case NodeKind::Mlp: return "m" + std::to_string(layer);
            case NodeKind::Logits: return "logits";
        }
        return "?";
    }
};

inline NodeId node_from_str(const std::string& s) {
    if (s == "emb") return NodeId::embedding();
    if (s == "logits") return NodeId::logits();
    if (s.size() >= 2 && s[0] == 'm')
        return NodeId::mlp(std::stoi(s.substr(1)));
    auto dot = s.find(".h");
    if (s.size() >= 4 && s[0] == 'a' && dot != std::string::npos)
        return NodeId::attn(std::stoi(s.substr(1, dot - 1)),
                            std::stoi(s.substr(dot + 2)));
    throw Error("bad node id '" + s + "'");
}

enum class Slot : uint8_t { Q, K, V, In };

inline const char* slot_name(Slot s) {
    switch (s) {
        case Slot::Q: return "q";
        case Slot::K: return "k";
        case Slot::V: return "v";
        case Slot::In: return "in";
    }
    return "?";
}

inline Slot slot_from_name(const std::string& s) {
    if (s == "q") return Slot::Q;
    if (s == "k") return Slot::K;
    if (s == "v") return Slot::V;
    if (s == "in") return Slot::In;
    throw Error("bad slot '" + s + "'");
}

struct EdgeId {
    NodeId src, dst;
    Slot slot = Slot::In;
    auto operator<=>(const EdgeId&) const = default;
    std::string str() const {
        return src.str() + "->" + dst.str() + ":" + slot_name(slot);
    }
};

using SlotKey = std::pair<NodeId, Slot>;

// Topological node order: embedding, then per layer all heads then the MLP,
// then logits.
inline std::vector<NodeId> graph_nodes(const ModelConfig& cfg) {
    std::vector<NodeId> out{NodeId::embedding()};
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeId::attn(l, h));
        out.push_back(NodeId::mlp(l));
    }
    out.push_back(NodeId::logits());
    return out;
}

// Sources writing into a target: everything strictly before it in the
// residual stream. Heads within a layer do not feed each other; the MLP
// reads its own layer's heads.
inline std::vector<NodeId> sources_of(const ModelConfig& cfg, NodeId dst) {
    std::vector<NodeId> out{NodeId::embedding()};
    int upto_layer = dst.kind == NodeKind::Logits ? cfg.n_layers : dst.layer;
    for (int l = 0; l < upto_layer; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) out.push_back(NodeId::attn(l, h));
        out.push_back(NodeId::mlp(l));
    }
    if (dst.kind == NodeKind::Mlp)
        for (int h = 0; h < cfg.n_heads; ++h)
            out.push_back(NodeId::attn(dst.layer, h));
    return out;
}

inline std::vector<Slot> slots_of(NodeId n) {
    if (n.kind == NodeKind::Head) return {Slot::Q, Slot::K, Slot::V};
    if (n.kind == NodeKind::Embedding) return {};
    return {Slot::In};
}

inline std::vector<EdgeId> list_edges(const ModelConfig& cfg) {
    std::vector<EdgeId> out;
    for (const NodeId& dst : graph_nodes(cfg))
        for (Slot slot : slots_of(dst))
            for (const NodeId& src : sources_of(cfg, dst))
                out.push_back({src, dst, slot});
    return out;
}

inline size_t edge_count_formula(int layers, int heads) {
    size_t L = static_cast<size_t>(layers), H = static_cast<size_t>(heads);
    size_t total = 0;
    for (size_t l = 0; l < L; ++l) {
        size_t before = 1 + (H + 1) * l;
        total += 3 * H * before;       // q/k/v slots of each head
        total += before + H;           // the layer's MLP input
    }
    total += 1 + (H + 1) * L;          // logits input
    return total;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct Model {
    ModelConfig config;
    Vocab vocab;
    std::map<std::string, Tensor> weights;

    // forward/backward counters used by the cost-model checks
    mutable uint64_t forward_passes = 0;
    mutable uint64_t backward_passes = 0;

    const Tensor& weight(const std::string& name) const {
        auto it = weights.find(name);
        if (it == weights.end()) throw Error("missing weight '" + name + "'");
        return it->second;
    }
};

namespace wnames {
inline std::string wq(int l, int h) {
    return "l" + std::to_string(l) + ".h" + std::to_string(h) + ".wq";
}
inline std::string wk(int l, int h) {
    return "l" + std::to_string(l) + ".h" + std::to_string(h) + ".wk";
}
inline std::string wv(int l, int h) {
    return "l" + std::to_string(l) + ".h" + std::to_string(h) + ".wv";
}
inline std::string wo(int l, int h) {
    return "l" + std::to_string(l) + ".h" + std::to_string(h) + ".wo";
}
inline std::string mlp_w1(int l) { return "l" + std::to_string(l) + ".mlp.w1"; }
inline std::string mlp_b1(int l) { return "l" + std::to_string(l) + ".mlp.b1"; }
inline std::string mlp_w2(int l) { return "l" + std::to_string(l) + ".mlp.w2"; }
inline std::string mlp_b2(int l) { return "l" + std::to_string(l) + ".mlp.b2"; }
inline std::string ln1_g(int l) { return "l" + std::to_string(l) + ".ln1.g"; }
inline std::string ln1_b(int l) { return "l" + std::to_string(l) + ".ln1.b"; }
inline std::string ln2_g(int l) { return "l" + std::to_string(l) + ".ln2.g"; }
inline std::string ln2_b(int l) { return "l" + std::to_string(l) + ".ln2.b"; }
}  // namespace wnames

inline Model init_model(const ModelConfig& cfg, const Vocab& vocab) {
    ModelConfig c = cfg;
    if (c.vocab_size == 0) c.vocab_size = static_cast<int>(vocab.size());
    c.validate();
    if (c.vocab_size != static_cast<int>(vocab.size()))
        throw Error("init_model: vocab size mismatch");

    Model m;
    m.config = c;
    m.vocab = vocab;
    auto randn = [&](const std::string& name, std::vector<size_t> shape,
                     double std_dev) {
        Rng rng = Rng::child(c.seed, name);
        Tensor t(std::move(shape));
        for (size_t i = 0; i < t.numel(); ++i) t[i] = std_dev * rng.normal();
        m.weights[name] = std::move(t);
    };
    auto fill = [&](const std::string& name, std::vector<size_t> shape,
                    double v) { m.weights[name] = Tensor(std::move(shape), v); };

    size_t d = static_cast<size_t>(c.d_model), dh = static_cast<size_t>(c.d_head);
    size_t dm = static_cast<size_t>(c.d_mlp), V = static_cast<size_t>(c.vocab_size);
    double ws = 0.05;
    randn("wte", {V, d}, ws);
    randn("wpe", {static_cast<size_t>(c.max_seq_len), d}, ws);
    if (!c.tie_embeddings) randn("wu", {d, V}, ws);
    for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) {
            randn(wnames::wq(l, h), {d, dh}, ws);
            randn(wnames::wk(l, h), {d, dh}, ws);
            randn(wnames::wv(l, h), {d, dh}, ws);
            randn(wnames::wo(l, h), {dh, d}, ws);
        }
        randn(wnames::mlp_w1(l), {d, dm}, ws);
        fill(wnames::mlp_b1(l), {1, dm}, 0.0);
        randn(wnames::mlp_w2(l), {dm, d}, ws);
        fill(wnames::mlp_b2(l), {1, d}, 0.0);
        if (c.layer_norm) {
            fill(wnames::ln1_g(l), {1, d}, 1.0);
            fill(wnames::ln1_b(l), {1, d}, 0.0);
            fill(wnames::ln2_g(l), {1, d}, 1.0);
            fill(wnames::ln2_b(l), {1, d}, 0.0);
        }
    }
    if (c.layer_norm) {
        fill("lnf.g", {1, d}, 1.0);
        fill("lnf.b", {1, d}, 0.0);
    }
    return m;
}

// ---------------------------------------------------------------------------
// patch specification
// ---------------------------------------------------------------------------

struct NodePatch {
    Tensor value;                      // [s,d] replacement
    std::vector<uint8_t> keep_neuron;  // empty: replace whole output;
                                       // else 1 = keep live column
};

struct EdgeInterp {
    double alpha = 1.0;  // contribution = alpha*live + (1-alpha)*ablated
    Tensor ablated;
};

// A hook rewrites the hidden row(s) at one token position, either at a
// residual checkpoint or across a set of node outputs (concatenated). The
// transform sees a [1,width] tape id and returns a replacement id; it may
// add leaves, which must then be bound via RunOptions::extra_inputs.
struct RowHook {
    bool on_resid = false;
    int resid_layer = -1;           // -1: after embedding, l: after layer l
    std::vector<NodeId> nodes;      // used when !on_resid
    size_t position = 0;
    std::function<int(Tape&, int)> transform;
};

struct PatchSpec {
    std::map<EdgeId, Tensor> edges;
    std::map<NodeId, NodePatch> nodes;
    std::map<SlotKey, Tensor> slots;
    std::map<EdgeId, EdgeInterp> interp;
    std::optional<RowHook> hook;

    bool empty() const {
        return edges.empty() && nodes.empty() && slots.empty() &&
               interp.empty() && !hook.has_value();
    }
};

struct RunOptions {
    bool full_logits = true;
    bool validate = true;
    std::optional<std::pair<int, int>> logit_diff;  // (y, y') at last position
    std::optional<int> ce_target;                   // answer CE at last position
    std::map<std::string, const Tensor*> extra_inputs;
};

struct GraphIds {
    std::map<NodeId, int> node_out;
    std::map<SlotKey, int> slot_in;
    std::map<EdgeId, int> custom_edge;  // contributions that differ from src out
    int logits = -1;
    int final_resid = -1;
    int metric = -1;
    int loss = -1;
    size_t seq_len = 0;
    bool full_logits = true;
};

struct TapeRun {
    Tape tape;
    GraphIds ids;
    std::vector<Tensor> vals;

    const Tensor& value(int id) const { return vals[static_cast<size_t>(id)]; }
    double metric() const { return value(ids.metric).item(); }
    double loss() const { return value(ids.loss).item(); }
};

// ---------------------------------------------------------------------------
// forward pass construction
// ---------------------------------------------------------------------------

namespace detail {

struct Builder {
    const Model& model;
    const PatchSpec& patch;
    const RunOptions& opts;
    Tape t;
    GraphIds ids;
    std::map<std::string, int> wleaf;
    std::map<NodeId, int> eff;
    std::set<SlotKey> custom_slots;

    Builder(const Model& m, const PatchSpec& p, const RunOptions& o)
        : model(m), patch(p), opts(o) {
        if (patch.hook && (!patch.edges.empty() || !patch.interp.empty()))
            throw Error("row hooks cannot be combined with edge patches");
        for (const auto& [e, v] : patch.edges) custom_slots.insert({e.dst, e.slot});
        for (const auto& [e, v] : patch.interp) custom_slots.insert({e.dst, e.slot});
    }

    int w(const std::string& name) {
        auto it = wleaf.find(name);
        if (it != wleaf.end()) return it->second;
        int id = t.leaf(name, model.weight(name).shape());
        wleaf[name] = id;
        return id;
    }

    int apply_node_patch(NodeId n, int raw, size_t s) {
        auto it = patch.nodes.find(n);
        if (it == patch.nodes.end()) return raw;
        const NodePatch& np = it->second;
        size_t d = static_cast<size_t>(model.config.d_model);
        if (np.value.shape() != std::vector<size_t>{s, d})
            throw Error("node patch for " + n.str() + " has wrong shape " +
                        shape_str(np.value));
        if (np.keep_neuron.empty()) return t.constant(np.value);
        if (np.keep_neuron.size() != d)
            throw Error("node patch neuron mask must have d_model entries");
        Tensor keep({1, d});
        Tensor masked = np.value;
        for (size_t j = 0; j < d; ++j) {
            keep[j] = np.keep_neuron[j] ? 1.0 : 0.0;
            if (np.keep_neuron[j])
                for (size_t r = 0; r < s; ++r) masked.at(r, j) = 0.0;
        }
        return t.add(t.mul(raw, t.constant(keep)), t.constant(masked));
    }

    // Pre-norm input of a target slot: a shared residual checkpoint unless
    // an edge into this slot was patched, in which case the per-source sum
    // is materialized (in the same source order as the checkpoints).
    int slot_input(NodeId dst, Slot slot, int checkpoint) {
        auto sp = patch.slots.find({dst, slot});
        int raw;
        if (sp != patch.slots.end()) {
            raw = t.constant(sp->second);
        } else if (custom_slots.count({dst, slot})) {
            raw = -1;
            for (const NodeId& src : sources_of(model.config, dst)) {
                int contrib = contribution(src, dst, slot);
                raw = raw < 0 ? contrib : t.add(raw, contrib);
            }
        } else {
            raw = checkpoint;
        }
        int sin = t.identity(raw);
        ids.slot_in[{dst, slot}] = sin;
        return sin;
    }

    int contribution(NodeId src, NodeId dst, Slot slot) {
        EdgeId e{src, dst, slot};
        auto ep = patch.edges.find(e);
        if (ep != patch.edges.end()) {
            int id = t.constant(ep->second);
            ids.custom_edge[e] = id;
            return id;
        }
        auto ip = patch.interp.find(e);
        if (ip != patch.interp.end()) {
            Tensor offset = ip->second.ablated;
            offset.scale_inplace(1.0 - ip->second.alpha);
            int id = t.add(t.scale(eff.at(src), ip->second.alpha),
                           t.constant(offset));
            ids.custom_edge[e] = id;
            return id;
        }
        return eff.at(src);
    }

    int maybe_ln(int x, const std::string& g, const std::string& b) {
        if (!model.config.layer_norm) return x;
        int n = t.layer_norm(x, 1e-5);
        return t.add(t.mul(n, w(g)), w(b));
    }

    int head_block(int l, int h, int q_in, int k_in, int v_in, size_t s) {
        int xq = maybe_ln(q_in, wnames::ln1_g(l), wnames::ln1_b(l));
        int xk = maybe_ln(k_in, wnames::ln1_g(l), wnames::ln1_b(l));
        int xv = maybe_ln(v_in, wnames::ln1_g(l), wnames::ln1_b(l));
        int q = t.matmul(xq, w(wnames::wq(l, h)));
        int k = t.matmul(xk, w(wnames::wk(l, h)));
        int v = t.matmul(xv, w(wnames::wv(l, h)));
        int scores = t.scale(t.matmul(q, k, false, true),
                             1.0 / std::sqrt(double(model.config.d_head)));
        Tensor mask({s, s});
        for (size_t i = 0; i < s; ++i)
            for (size_t j = i + 1; j < s; ++j) mask.at(i, j) = -1e9;
        int probs = t.softmax(t.add(scores, t.constant(mask)));
        int mix = t.matmul(probs, v);
        return t.matmul(mix, w(wnames::wo(l, h)));
    }

    int mlp_block(int l, int x_in) {
        int x = maybe_ln(x_in, wnames::ln2_g(l), wnames::ln2_b(l));
        int h = t.add(t.matmul(x, w(wnames::mlp_w1(l))), w(wnames::mlp_b1(l)));
        if (model.config.gelu_act) h = t.gelu(h);
        return t.add(t.matmul(h, w(wnames::mlp_w2(l))), w(wnames::mlp_b2(l)));
    }

    void apply_hook_nodes(const std::vector<NodeId>& ready) {
        if (!patch.hook || patch.hook->on_resid) return;
        const RowHook& hk = *patch.hook;
        for (const NodeId& n : hk.nodes)
            if (std::find(ready.begin(), ready.end(), n) == ready.end())
                return;  // applied at the group where all nodes are ready
        if (hook_applied_) return;
        hook_applied_ = true;
        std::vector<int> rows;
        int cat = -1;
        for (const NodeId& n : hk.nodes) {
            int r = t.row_get(eff.at(n), hk.position);
            cat = cat < 0 ? r : t.concat_cols(cat, r);
        }
        int out = hk.transform(t, cat);
        size_t off = 0;
        size_t d = static_cast<size_t>(model.config.d_model);
        for (const NodeId& n : hk.nodes) {
            int piece = hk.nodes.size() == 1 ? out : t.slice_cols(out, off, d);
            eff[n] = t.row_set(eff.at(n), hk.position, piece);
            ids.node_out[n] = eff[n];
            off += d;
        }
    }

    int apply_hook_resid(int layer, int checkpoint) {
        if (!patch.hook || !patch.hook->on_resid ||
            patch.hook->resid_layer != layer)
            return checkpoint;
        const RowHook& hk = *patch.hook;
        int r = t.row_get(checkpoint, hk.position);
        int out = hk.transform(t, r);
        return t.row_set(checkpoint, hk.position, out);
    }

    bool hook_applied_ = false;
};

}  // namespace detail

inline TapeRun run_model(const Model& model, const std::vector<int>& tokens,
                         const PatchSpec& patch = {},
                         const RunOptions& opts = {}) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) throw Error("run_model: empty token sequence");
    if (tokens.size() > static_cast<size_t>(cfg.max_seq_len))
        throw Error("run_model: sequence longer than max_seq_len");
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab_size)
            throw Error("run_model: token id " + std::to_string(tok) +
                        " out of vocabulary");

    model.forward_passes += 1;
    detail::Builder b(model, patch, opts);
    Tape& t = b.t;
    size_t s = tokens.size();
    b.ids.seq_len = s;
    b.ids.full_logits = opts.full_logits;

    // embedding node
    std::vector<int> pos_ids(s);
    for (size_t i = 0; i < s; ++i) pos_ids[i] = static_cast<int>(i);
    int emb_raw = t.add(t.embed_rows(b.w("wte"), tokens),
                        t.embed_rows(b.w("wpe"), pos_ids));
    NodeId emb = NodeId::embedding();
    b.eff[emb] = b.apply_node_patch(emb, emb_raw, s);
    b.ids.node_out[emb] = b.eff[emb];
    b.apply_hook_nodes({emb});

    int R = b.apply_hook_resid(-1, b.eff[emb]);

    for (int l = 0; l < cfg.n_layers; ++l) {
        std::vector<NodeId> layer_heads;
        for (int h = 0; h < cfg.n_heads; ++h) {
            NodeId hd = NodeId::attn(l, h);
            int q_in = b.slot_input(hd, Slot::Q, R);
            int k_in = b.slot_input(hd, Slot::K, R);
            int v_in = b.slot_input(hd, Slot::V, R);
            int raw = b.head_block(l, h, q_in, k_in, v_in, s);
            b.eff[hd] = b.apply_node_patch(hd, raw, s);
            b.ids.node_out[hd] = b.eff[hd];
            layer_heads.push_back(hd);
        }
        b.apply_hook_nodes(layer_heads);
        int r_att = R;
        for (const NodeId& hd : layer_heads) r_att = t.add(r_att, b.eff[hd]);

        NodeId mn = NodeId::mlp(l);
        int m_in = b.slot_input(mn, Slot::In, r_att);
        int m_raw = b.mlp_block(l, m_in);
        b.eff[mn] = b.apply_node_patch(mn, m_raw, s);
        b.ids.node_out[mn] = b.eff[mn];
        b.apply_hook_nodes({mn});
        R = t.add(r_att, b.eff[mn]);
        R = b.apply_hook_resid(l, R);
    }

    NodeId lg = NodeId::logits();
    int l_in = b.slot_input(lg, Slot::In, R);
    b.ids.final_resid = l_in;
    int xf = b.maybe_ln(l_in, "lnf.g", "lnf.b");
    int head_in = opts.full_logits ? xf : t.row_get(xf, s - 1);
    int logits = cfg.tie_embeddings ? t.matmul(head_in, b.w("wte"), false, true)
                                    : t.matmul(head_in, b.w("wu"));
    b.ids.node_out[lg] = logits;
    b.ids.logits = logits;

    int V = cfg.vocab_size;
    size_t last = opts.full_logits ? s - 1 : 0;
    if (opts.logit_diff) {
        auto [y, yp] = *opts.logit_diff;
        if (y < 0 || y >= V || yp < 0 || yp >= V)
            throw Error("run_model: metric token out of vocabulary");
        int py = t.pick(logits, {static_cast<int>(last) * V + y});
        int pyp = t.pick(logits, {static_cast<int>(last) * V + yp});
        b.ids.metric = t.sum(t.sub(py, pyp));
    }
    if (opts.ce_target) {
        if (*opts.ce_target < 0 || *opts.ce_target >= V)
            throw Error("run_model: CE target out of vocabulary");
        b.ids.loss =
            t.softmax_xent(logits, {static_cast<int>(last), *opts.ce_target});
    }

    std::map<std::string, const Tensor*> inputs;
    for (const auto& [name, id] : b.wleaf)
        inputs[name] = &model.weight(name);
    for (const auto& [name, ten] : opts.extra_inputs) inputs[name] = ten;

    TapeRun run;
    run.ids = std::move(b.ids);
    run.tape = std::move(b.t);
    run.vals = evaluate(run.tape, inputs, opts.validate);
    return run;
}

inline std::vector<Tensor> backward_run(const Model& model, const TapeRun& run,
                                        int scalar_id) {
    model.backward_passes += 1;
    return backward(run.tape, run.vals, scalar_id);
}

// ---------------------------------------------------------------------------
// activation cache and the plain forward API
// ---------------------------------------------------------------------------

struct ActivationCache {
    std::map<NodeId, Tensor> node_out;
    std::map<SlotKey, Tensor> slot_in;
    std::map<EdgeId, Tensor> custom_edge;
    size_t seq_len = 0;

    const Tensor& out(NodeId n) const {
        auto it = node_out.find(n);
        if (it == node_out.end())
            throw Error("cache: no output for " + n.str());
        return it->second;
    }

    // Contribution of edge e to its target slot: the source output unless
    // the run replaced that specific edge.
    const Tensor& edge_contribution(const EdgeId& e) const {
        auto it = custom_edge.find(e);
        if (it != custom_edge.end()) return it->second;
        return out(e.src);
    }

    const Tensor& slot_input(NodeId n, Slot s) const {
        auto it = slot_in.find({n, s});
        if (it == slot_in.end())
            throw Error("cache: no slot input for " + n.str());
        return it->second;
    }
};

struct ForwardResult {
    Tensor logits;  // [s, vocab]
    ActivationCache cache;
};

inline ActivationCache extract_cache(const TapeRun& run) {
    ActivationCache cache;
    cache.seq_len = run.ids.seq_len;
    for (const auto& [n, id] : run.ids.node_out)
        if (n.kind != NodeKind::Logits) cache.node_out[n] = run.value(id);
    for (const auto& [key, id] : run.ids.slot_in)
        cache.slot_in[key] = run.value(id);
    for (const auto& [e, id] : run.ids.custom_edge)
        cache.custom_edge[e] = run.value(id);
    return cache;
}

inline ForwardResult forward(const Model& model, const std::vector<int>& tokens,
                             const PatchSpec& patch = {}) {
    TapeRun run = run_model(model, tokens, patch);
    ForwardResult r;
    r.logits = run.value(run.ids.logits);
    r.cache = extract_cache(run);
    return r;
}

inline Tensor forward_patched(const Model& model,
                              const std::vector<int>& tokens,
                              const PatchSpec& patch) {
    TapeRun run = run_model(model, tokens, patch);
    return run.value(run.ids.logits);
}

inline double logit_diff_metric(const Tensor& logits, int y, int y_prime) {
    size_t last = logits.rows() - 1;
    return logits.at(last, static_cast<size_t>(y)) -
           logits.at(last, static_cast<size_t>(y_prime));
}

inline std::vector<int> encode(const Model& model, const std::string& prompt) {
    std::vector<int> toks{Vocab::kBos};
    for (int id : model.vocab.tokenize(prompt)) toks.push_back(id);
    return toks;
}

inline int argmax_last(const Tensor& logits) {
    size_t last = logits.rows() - 1, V = logits.cols();
    size_t best = 0;
    for (size_t j = 1; j < V; ++j)
        if (logits.at(last, j) > logits.at(last, best)) best = j;
    return static_cast<int>(best);
}

// Greedy decode of n tokens starting after `tokens`.
inline std::vector<int> greedy_decode(const Model& model,
                                      std::vector<int> tokens, size_t n) {
    std::vector<int> out;
    for (size_t i = 0; i < n; ++i) {
        RunOptions opts;
        opts.full_logits = false;
        TapeRun run = run_model(model, tokens, {}, opts);
        int next = argmax_last(run.value(run.ids.logits));
        out.push_back(next);
        tokens.push_back(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainExample {
    std::vector<int> tokens;  // includes <bos>
    int answer = -1;
};

inline std::vector<TrainExample> to_train_examples(
    const Model& model, const std::vector<TaskInstance>& instances,
    bool include_counterfactuals) {
    std::vector<TrainExample> out;
    auto push = [&](const std::string& prompt, const std::string& answer) {
        TrainExample ex;
        ex.tokens = encode(model, prompt);
        ex.answer = model.vocab.id(answer);
        out.push_back(std::move(ex));
    };
    for (const auto& inst : instances) {
        push(inst.prompt, inst.answer());
        if (!include_counterfactuals) continue;
        for (const auto& [name, cf] : inst.counterfactuals) {
            if (cf.answer_key < 0) continue;
            push(cf.prompt, cf.choices[static_cast<size_t>(cf.answer_key)]);
        }
    }
    return out;
}

struct TrainHyper {
    size_t steps = 2000;
    size_t batch_size = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> losses;  // mean batch loss per step
    std::vector<std::string> warnings;
};

// Flags 200-step windows where the loss moved up by more than 10%.
inline std::vector<std::string> check_training_health(
    const std::vector<double>& losses) {
    std::vector<std::string> warnings;
    const size_t window = 100;
    for (size_t end = 2 * window; end <= losses.size(); end += window) {
        double early = 0.0, late = 0.0;
        for (size_t i = end - 2 * window; i < end - window; ++i)
            early += losses[i];
        for (size_t i = end - window; i < end; ++i) late += losses[i];
        if (late > 1.10 * early)
            warnings.push_back("loss increased by >10% over steps " +
                               std::to_string(end - 2 * window) + ".." +
                               std::to_string(end));
    }
    return warnings;
}

inline TrainLog train_model(Model& model,
                            const std::vector<TrainExample>& examples,
                            const TrainHyper& hyper) {
    TrainLog log;
    if (hyper.steps == 0) return log;
    if (examples.empty()) throw Error("train_model: empty dataset");

    std::map<std::string, Tensor> m1, m2;
    for (const auto& [name, t] : model.weights) {
        m1[name] = Tensor(t.shape());
        m2[name] = Tensor(t.shape());
    }

    Rng rng = Rng::child(hyper.seed, "train");
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // forces an initial shuffle

    RunOptions opts;
    opts.full_logits = false;
    opts.validate = false;

    for (size_t step = 1; step <= hyper.steps; ++step) {
        std::map<std::string, Tensor> grad;
        double batch_loss = 0.0;
        for (size_t bi = 0; bi < hyper.batch_size; ++bi) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const TrainExample& ex = examples[order[cursor++]];
            opts.ce_target = ex.answer;
            TapeRun run = run_model(model, ex.tokens, {}, opts);
            double loss = run.loss();
            if (!std::isfinite(loss))
                throw Error("train_model: loss diverged at step " +
                            std::to_string(step));
            batch_loss += loss;
            auto grads = backward_run(model, run, run.ids.loss);
            for (size_t ni = 0; ni < run.tape.nodes.size(); ++ni) {
                const TapeNode& nd = run.tape.nodes[ni];
                if (nd.op != Op::Leaf || !model.weights.count(nd.name)) continue;
                if (grads[ni].numel() == 0) continue;
                auto it = grad.find(nd.name);
                if (it == grad.end())
                    grad[nd.name] = grads[ni];
                else
                    it->second.add_inplace(grads[ni]);
            }
        }
        batch_loss /= static_cast<double>(hyper.batch_size);
        log.losses.push_back(batch_loss);

        double sq = 0.0;
        for (auto& [name, g] : grad) {
            g.scale_inplace(1.0 / static_cast<double>(hyper.batch_size));
            for (size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
        }
        double norm = std::sqrt(sq);
        double clip = norm > hyper.grad_clip && norm > 0.0
                          ? hyper.grad_clip / norm
                          : 1.0;

        double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
        for (auto& [name, g] : grad) {
            Tensor& w = model.weights[name];
            Tensor& v1 = m1[name];
            Tensor& v2 = m2[name];
            for (size_t i = 0; i < g.numel(); ++i) {
                double gi = g[i] * clip;
                v1[i] = hyper.beta1 * v1[i] + (1.0 - hyper.beta1) * gi;
                v2[i] = hyper.beta2 * v2[i] + (1.0 - hyper.beta2) * gi * gi;
                w[i] -= hyper.lr * (v1[i] / bc1) /
                        (std::sqrt(v2[i] / bc2) + hyper.adam_eps);
            }
        }
    }
    log.warnings = check_training_health(log.losses);
    return log;
}

inline double answer_accuracy(const Model& model,
                              const std::vector<TrainExample>& examples) {
    if (examples.empty()) return 0.0;
    size_t hits = 0;
    RunOptions opts;
    opts.full_logits = false;
    for (const auto& ex : examples) {
        TapeRun run = run_model(model, ex.tokens, {}, opts);
        if (argmax_last(run.value(run.ids.logits)) == ex.answer) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline uint64_t model_hash(const Model& model) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    for (const auto& [name, t] : model.weights) {
        for (char c : name) mix(static_cast<uint64_t>(c));
        for (double d : t.vec()) {
            uint64_t bits;
            static_assert(sizeof(bits) == sizeof(d));
            std::memcpy(&bits, &d, sizeof(bits));
            mix(bits);
        }
    }
    return h;
}

inline void save_model(const Model& model, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = {{"n_layers", model.config.n_layers},
                   {"n_heads", model.config.n_heads},
                   {"d_model", model.config.d_model},
                   {"d_head", model.config.d_head},
                   {"d_mlp", model.config.d_mlp},
                   {"vocab_size", model.config.vocab_size},
                   {"max_seq_len", model.config.max_seq_len},
                   {"seed", model.config.seed},
                   {"layer_norm", model.config.layer_norm},
                   {"gelu_act", model.config.gelu_act},
                   {"tie_embeddings", model.config.tie_embeddings}};
    j["vocab"] = model.vocab.words();
    nlohmann::json wj;
    for (const auto& [name, t] : model.weights) wj[name] = tensor_to_json(t);
    j["weights"] = std::move(wj);
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out << j.dump();
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("format_version").get<int>() != 1)
        throw Error("unsupported checkpoint version");
    Model m;
    const auto& c = j.at("config");
    m.config.n_layers = c.at("n_layers").get<int>();
    m.config.n_heads = c.at("n_heads").get<int>();
    m.config.d_model = c.at("d_model").get<int>();
    m.config.d_head = c.at("d_head").get<int>();
    m.config.d_mlp = c.at("d_mlp").get<int>();
    m.config.vocab_size = c.at("vocab_size").get<int>();
    m.config.max_seq_len = c.at("max_seq_len").get<int>();
    m.config.seed = c.at("seed").get<uint64_t>();
    m.config.layer_norm = c.at("layer_norm").get<bool>();
    m.config.gelu_act = c.at("gelu_act").get<bool>();
    m.config.tie_embeddings = c.at("tie_embeddings").get<bool>();
    m.config.validate();
    auto words = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& wd : words) m.vocab.add(wd);
    if (m.vocab.size() != words.size())
        throw Error("checkpoint vocab has duplicates");
    for (auto it = j.at("weights").begin(); it != j.at("weights").end(); ++it) {
        Tensor t = tensor_from_json(it.value());
        if (!t.all_finite())
            throw Error("checkpoint weight '" + it.key() + "' is not finite");
        m.weights[it.key()] = std::move(t);
    }
    // structural validation: reinit must produce the same weight names/shapes
    Model ref = init_model(m.config, m.vocab);
    for (const auto& [name, t] : ref.weights) {
        if (!m.weights.count(name))
            throw Error("checkpoint missing weight '" + name + "'");
        if (m.weights[name].shape() != t.shape())
            throw Error("checkpoint weight '" + name + "' has wrong shape");
    }
    if (m.weights.size() != ref.weights.size())
        throw Error("checkpoint has extra weights");
    return m;
}

}  // namespace cbench

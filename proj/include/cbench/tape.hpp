// Reverse-mode autodiff over a fixed op set: a tape of tensor operations is
// recorded once, then evaluated and differentiated by index order. Gradients
// are accumulated in tape order, so repeated runs are bit-identical.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cbench/tensor.hpp"

namespace cbench {

enum class Op : uint8_t {
    Leaf,        // named input, bound at evaluate()
    Const,       // inline tensor payload
    Identity,    // copy; used to give graph locations their own gradient slot
    Add,         // a + b, b may be a [1,c] row broadcast over a's rows
    Sub,         // a - b, same broadcast rule
    Mul,         // hadamard, same broadcast rule
    Scale,       // a * scalar
    Matmul,      // optional transposes on either side
    Gelu,
    Relu,
    Sigmoid,
    LayerNorm,   // per-row normalize over the last dim, no affine
    Softmax,     // per row
    EmbedRows,   // gather rows of a by token ids
    RowGet,      // row r of a -> [1,c]
    RowSet,      // a with row r replaced by b [1,c]
    ConcatCols,  // [1,m],[1,n] -> [1,m+n]
    SliceCols,   // [1,n] -> [1,len] starting at off
    Pick,        // gather flat entries -> [k]
    Sum,         // -> scalar
    SqSum,       // sum of squares -> scalar
    SoftmaxXent, // mean cross-entropy over (row,target) pairs -> scalar
    XentSoft,    // -sum(p * log softmax(a)) for [1,V] logits -> scalar
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Identity: return "identity";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Matmul: return "matmul";
        case Op::Gelu: return "gelu";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::LayerNorm: return "layernorm";
        case Op::Softmax: return "softmax";
        case Op::EmbedRows: return "embed_rows";
        case Op::RowGet: return "row_get";
        case Op::RowSet: return "row_set";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceCols: return "slice_cols";
        case Op::Pick: return "pick";
        case Op::Sum: return "sum";
        case Op::SqSum: return "sq_sum";
        case Op::SoftmaxXent: return "softmax_xent";
        case Op::XentSoft: return "xent_soft";
    }
    return "?";
}

struct TapeNode {
    Op op = Op::Leaf;
    int a = -1;
    int b = -1;
    double scalar = 0.0;          // Scale factor, LayerNorm eps
    size_t i0 = 0, i1 = 0;        // RowGet/RowSet row, SliceCols off/len
    bool trans_a = false, trans_b = false;
    std::vector<int> ids;         // EmbedRows token ids, Pick indices,
                                  // SoftmaxXent (row,target) pairs flattened
    std::vector<double> payload;  // Const data, XentSoft target probs
    std::vector<size_t> shape;    // output shape (Leaf/Const carry theirs)
    std::string name;             // Leaf name
};

class Tape {
public:
    std::vector<TapeNode> nodes;
    std::map<std::string, int> named;  // optional labels for outputs

    int leaf(const std::string& name, std::vector<size_t> shape) {
        TapeNode n;
        n.op = Op::Leaf;
        n.name = name;
        n.shape = std::move(shape);
        return push(std::move(n));
    }

    int constant(const Tensor& t) {
        TapeNode n;
        n.op = Op::Const;
        n.shape = t.shape();
        n.payload = t.vec();
        return push(std::move(n));
    }

    int identity(int a) { return unary(Op::Identity, a, shape_of(a)); }
    int gelu(int a) { return unary(Op::Gelu, a, shape_of(a)); }
    int relu(int a) { return unary(Op::Relu, a, shape_of(a)); }
    int sigmoid(int a) { return unary(Op::Sigmoid, a, shape_of(a)); }
    int softmax(int a) { return unary(Op::Softmax, a, shape_of(a)); }

    int layer_norm(int a, double eps) {
        TapeNode n = node2(Op::LayerNorm, a, -1, shape_of(a));
        n.scalar = eps;
        return push(std::move(n));
    }

    int add(int a, int b) { return broadcast_bin(Op::Add, a, b); }
    int sub(int a, int b) { return broadcast_bin(Op::Sub, a, b); }
    int mul(int a, int b) { return broadcast_bin(Op::Mul, a, b); }

    int scale(int a, double s) {
        TapeNode n = node2(Op::Scale, a, -1, shape_of(a));
        n.scalar = s;
        return push(std::move(n));
    }

    int matmul(int a, int b, bool trans_a = false, bool trans_b = false) {
        auto sa = shape_of(a), sb = shape_of(b);
        if (sa.size() != 2 || sb.size() != 2)
            throw Error("matmul: rank-2 operands required");
        size_t m = trans_a ? sa[1] : sa[0];
        size_t ka = trans_a ? sa[0] : sa[1];
        size_t kb = trans_b ? sb[1] : sb[0];
        size_t nn = trans_b ? sb[0] : sb[1];
        if (ka != kb)
            throw Error("matmul: inner dimension mismatch " +
                        std::to_string(ka) + " vs " + std::to_string(kb));
        TapeNode n = node2(Op::Matmul, a, b, {m, nn});
        n.trans_a = trans_a;
        n.trans_b = trans_b;
        return push(std::move(n));
    }

    int embed_rows(int table, const std::vector<int>& token_ids) {
        auto st = shape_of(table);
        if (st.size() != 2) throw Error("embed_rows: table must be rank 2");
        TapeNode n = node2(Op::EmbedRows, table, -1,
                           {token_ids.size(), st[1]});
        n.ids = token_ids;
        return push(std::move(n));
    }

    int row_get(int a, size_t r) {
        auto sa = shape_of(a);
        if (sa.size() != 2 || r >= sa[0]) throw Error("row_get: bad row");
        TapeNode n = node2(Op::RowGet, a, -1, {1, sa[1]});
        n.i0 = r;
        return push(std::move(n));
    }

    int row_set(int a, size_t r, int v) {
        auto sa = shape_of(a), sv = shape_of(v);
        if (sa.size() != 2 || r >= sa[0] || sv != std::vector<size_t>{1, sa[1]})
            throw Error("row_set: shape mismatch");
        TapeNode n = node2(Op::RowSet, a, v, sa);
        n.i0 = r;
        return push(std::move(n));
    }

    int concat_cols(int a, int b) {
        auto sa = shape_of(a), sb = shape_of(b);
        if (sa.size() != 2 || sb.size() != 2 || sa[0] != 1 || sb[0] != 1)
            throw Error("concat_cols: expects [1,n] operands");
        return push(node2(Op::ConcatCols, a, b, {1, sa[1] + sb[1]}));
    }

    int slice_cols(int a, size_t off, size_t len) {
        auto sa = shape_of(a);
        if (sa.size() != 2 || sa[0] != 1 || off + len > sa[1])
            throw Error("slice_cols: out of range");
        TapeNode n = node2(Op::SliceCols, a, -1, {1, len});
        n.i0 = off;
        n.i1 = len;
        return push(std::move(n));
    }

    int pick(int a, const std::vector<int>& flat_indices) {
        TapeNode n = node2(Op::Pick, a, -1, {flat_indices.size()});
        n.ids = flat_indices;
        return push(std::move(n));
    }

    int sum(int a) { return push(node2(Op::Sum, a, -1, {})); }
    int sq_sum(int a) { return push(node2(Op::SqSum, a, -1, {})); }

    // rows_targets: flattened (row, target) pairs; result is the mean CE.
    int softmax_xent(int logits, const std::vector<int>& rows_targets) {
        if (rows_targets.empty() || rows_targets.size() % 2 != 0)
            throw Error("softmax_xent: needs (row,target) pairs");
        TapeNode n = node2(Op::SoftmaxXent, logits, -1, {});
        n.ids = rows_targets;
        return push(std::move(n));
    }

    int xent_soft(int logits, const std::vector<double>& probs) {
        auto sl = shape_of(logits);
        if (sl.size() != 2 || sl[0] != 1 || sl[1] != probs.size())
            throw Error("xent_soft: logits/probs mismatch");
        TapeNode n = node2(Op::XentSoft, logits, -1, {});
        n.payload = probs;
        return push(std::move(n));
    }

    const std::vector<size_t>& shape_of(int id) const {
        return nodes[static_cast<size_t>(id)].shape;
    }

    void label(const std::string& name, int id) { named[name] = id; }

private:
    TapeNode node2(Op op, int a, int b, std::vector<size_t> shape) {
        TapeNode n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.shape = std::move(shape);
        return n;
    }

    int unary(Op op, int a, std::vector<size_t> shape) {
        return push(node2(op, a, -1, std::move(shape)));
    }

    int broadcast_bin(Op op, int a, int b) {
        auto sa = shape_of(a), sb = shape_of(b);
        if (sa == sb) return push(node2(op, a, b, sa));
        bool row_bcast = sa.size() == 2 && sb.size() == 2 && sb[0] == 1 &&
                         sa[1] == sb[1] && sa[0] >= 1;
        if (!row_bcast)
            throw Error(std::string(op_name(op)) + ": shape mismatch " +
                        dims(sa) + " vs " + dims(sb));
        return push(node2(op, a, b, sa));
    }

    static std::string dims(const std::vector<size_t>& s) {
        std::string out = "(";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }

    int push(TapeNode n) {
        if (n.a >= static_cast<int>(nodes.size()) ||
            n.b >= static_cast<int>(nodes.size()))
            throw Error("tape: forward reference");
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }
};

namespace detail {

inline void matmul_into(const Tensor& A, const Tensor& B, bool ta, bool tb,
                        Tensor& C, bool accumulate) {
    size_t m = ta ? A.cols() : A.rows();
    size_t k = ta ? A.rows() : A.cols();
    size_t n = tb ? B.rows() : B.cols();
    if (!accumulate)
        std::fill(C.vec().begin(), C.vec().end(), 0.0);
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    size_t lda = A.cols(), ldb = B.cols();
    if (!ta && !tb) {
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
                double av = a[i * lda + p];
                if (av == 0.0) continue;
                const double* brow = b + p * ldb;
                double* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else if (!ta && tb) {
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                const double* arow = a + i * lda;
                const double* brow = b + j * ldb;
                for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                c[i * n + j] += acc;
            }
    } else if (ta && !tb) {
        for (size_t p = 0; p < k; ++p) {
            const double* arow = a + p * lda;
            const double* brow = b + p * ldb;
            for (size_t i = 0; i < m; ++i) {
                double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (size_t p = 0; p < k; ++p)
                    acc += a[p * lda + i] * b[j * ldb + p];
                c[i * n + j] += acc;
            }
    }
}

inline double gelu_val(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad(double x) {
    double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) + x * phi;
}

inline void softmax_row(const double* in, double* out, size_t n) {
    double mx = in[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        z += out[i];
    }
    for (size_t i = 0; i < n; ++i) out[i] /= z;
}

}  // namespace detail

// Forward evaluation. When validate is set, every node's output is checked
// for finiteness and a non-finite value reports the node index.
inline std::vector<Tensor> evaluate(
    const Tape& tape, const std::map<std::string, const Tensor*>& inputs,
    bool validate = true) {
    std::vector<Tensor> vals(tape.nodes.size());
    for (size_t i = 0; i < tape.nodes.size(); ++i) {
        const TapeNode& nd = tape.nodes[i];
        Tensor& out = vals[i];
        auto& va = nd.a >= 0 ? vals[static_cast<size_t>(nd.a)] : out;
        auto& vb = nd.b >= 0 ? vals[static_cast<size_t>(nd.b)] : out;
        switch (nd.op) {
            case Op::Leaf: {
                auto it = inputs.find(nd.name);
                if (it == inputs.end())
                    throw Error("evaluate: unbound leaf '" + nd.name + "'");
                if (it->second->shape() != nd.shape)
                    throw Error("evaluate: leaf '" + nd.name +
                                "' shape mismatch");
                out = *it->second;
                break;
            }
            case Op::Const:
                out = Tensor(nd.shape, nd.payload);
                break;
            case Op::Identity:
                out = va;
                break;
            case Op::Add:
            case Op::Sub:
            case Op::Mul: {
                out = Tensor(nd.shape);
                size_t r = out.rows(), c = out.cols();
                bool bc = vb.rows() == 1 && r > 1;
                for (size_t i2 = 0; i2 < r; ++i2)
                    for (size_t j = 0; j < c; ++j) {
                        double x = va[i2 * c + j];
                        double y = vb[(bc ? 0 : i2) * c + j];
                        out[i2 * c + j] = nd.op == Op::Add   ? x + y
                                          : nd.op == Op::Sub ? x - y
                                                             : x * y;
                    }
                break;
            }
            case Op::Scale:
                out = va;
                out.scale_inplace(nd.scalar);
                break;
            case Op::Matmul:
                out = Tensor(nd.shape);
                detail::matmul_into(va, vb, nd.trans_a, nd.trans_b, out, false);
                break;
            case Op::Gelu:
                out = Tensor(nd.shape);
                for (size_t j = 0; j < out.numel(); ++j)
                    out[j] = detail::gelu_val(va[j]);
                break;
            case Op::Relu:
                out = Tensor(nd.shape);
                for (size_t j = 0; j < out.numel(); ++j)
                    out[j] = va[j] > 0.0 ? va[j] : 0.0;
                break;
            case Op::Sigmoid:
                out = Tensor(nd.shape);
                for (size_t j = 0; j < out.numel(); ++j)
                    out[j] = 1.0 / (1.0 + std::exp(-va[j]));
                break;
            case Op::LayerNorm: {
                out = Tensor(nd.shape);
                size_t r = va.rows(), c = va.cols();
                for (size_t i2 = 0; i2 < r; ++i2) {
                    const double* x = va.data() + i2 * c;
                    double* y = out.data() + i2 * c;
                    double mu = 0.0;
                    for (size_t j = 0; j < c; ++j) mu += x[j];
                    mu /= static_cast<double>(c);
                    double var = 0.0;
                    for (size_t j = 0; j < c; ++j)
                        var += (x[j] - mu) * (x[j] - mu);
                    var /= static_cast<double>(c);
                    double inv = 1.0 / std::sqrt(var + nd.scalar);
                    for (size_t j = 0; j < c; ++j) y[j] = (x[j] - mu) * inv;
                }
                break;
            }
            case Op::Softmax: {
                out = Tensor(nd.shape);
                size_t r = va.rows(), c = va.cols();
                for (size_t i2 = 0; i2 < r; ++i2)
                    detail::softmax_row(va.data() + i2 * c,
                                        out.data() + i2 * c, c);
                break;
            }
            case Op::EmbedRows: {
                out = Tensor(nd.shape);
                size_t c = va.cols();
                for (size_t i2 = 0; i2 < nd.ids.size(); ++i2) {
                    int tok = nd.ids[i2];
                    if (tok < 0 || static_cast<size_t>(tok) >= va.rows())
                        throw Error("embed_rows: id out of range");
                    for (size_t j = 0; j < c; ++j)
                        out[i2 * c + j] = va[static_cast<size_t>(tok) * c + j];
                }
                break;
            }
            case Op::RowGet:
                out = va.row(nd.i0);
                break;
            case Op::RowSet: {
                out = va;
                size_t c = out.cols();
                for (size_t j = 0; j < c; ++j) out[nd.i0 * c + j] = vb[j];
                break;
            }
            case Op::ConcatCols: {
                out = Tensor(nd.shape);
                for (size_t j = 0; j < va.numel(); ++j) out[j] = va[j];
                for (size_t j = 0; j < vb.numel(); ++j)
                    out[va.numel() + j] = vb[j];
                break;
            }
            case Op::SliceCols: {
                out = Tensor(nd.shape);
                for (size_t j = 0; j < nd.i1; ++j) out[j] = va[nd.i0 + j];
                break;
            }
            case Op::Pick: {
                out = Tensor(nd.shape);
                for (size_t j = 0; j < nd.ids.size(); ++j) {
                    int idx = nd.ids[j];
                    if (idx < 0 || static_cast<size_t>(idx) >= va.numel())
                        throw Error("pick: index out of range");
                    out[j] = va[static_cast<size_t>(idx)];
                }
                break;
            }
            case Op::Sum: {
                double acc = 0.0;
                for (size_t j = 0; j < va.numel(); ++j) acc += va[j];
                out = Tensor::scalar(acc);
                break;
            }
            case Op::SqSum: {
                double acc = 0.0;
                for (size_t j = 0; j < va.numel(); ++j) acc += va[j] * va[j];
                out = Tensor::scalar(acc);
                break;
            }
            case Op::SoftmaxXent: {
                size_t c = va.cols();
                std::vector<double> p(c);
                double acc = 0.0;
                size_t npairs = nd.ids.size() / 2;
                for (size_t j = 0; j < npairs; ++j) {
                    size_t row = static_cast<size_t>(nd.ids[2 * j]);
                    size_t tgt = static_cast<size_t>(nd.ids[2 * j + 1]);
                    detail::softmax_row(va.data() + row * c, p.data(), c);
                    acc -= std::log(std::max(p[tgt], 1e-300));
                }
                out = Tensor::scalar(acc / static_cast<double>(npairs));
                break;
            }
            case Op::XentSoft: {
                size_t c = va.cols();
                std::vector<double> p(c);
                detail::softmax_row(va.data(), p.data(), c);
                double acc = 0.0;
                for (size_t j = 0; j < c; ++j)
                    acc -= nd.payload[j] * std::log(std::max(p[j], 1e-300));
                out = Tensor::scalar(acc);
                break;
            }
        }
        if (validate && !out.all_finite())
            throw Error("evaluate: non-finite value at node " +
                        std::to_string(i) + " (" + op_name(nd.op) + ")");
    }
    return vals;
}

// Reverse pass from a scalar output; returns one gradient per tape node
// (empty tensors where a node was never reached).
inline std::vector<Tensor> backward(const Tape& tape,
                                    const std::vector<Tensor>& vals,
                                    int output) {
    if (!tape.nodes[static_cast<size_t>(output)].shape.empty())
        throw Error("backward: output must be scalar");
    std::vector<Tensor> grads(tape.nodes.size());
    auto touch = [&](int id) -> Tensor& {
        Tensor& g = grads[static_cast<size_t>(id)];
        if (g.numel() == 0 &&
            Tensor::numel_of(tape.nodes[static_cast<size_t>(id)].shape) != 0)
            g = Tensor(tape.nodes[static_cast<size_t>(id)].shape);
        if (g.numel() == 0) g = Tensor::scalar(0.0);
        return g;
    };
    touch(output)[0] = 1.0;
    for (int i = static_cast<int>(tape.nodes.size()) - 1; i >= 0; --i) {
        const TapeNode& nd = tape.nodes[static_cast<size_t>(i)];
        Tensor& g = grads[static_cast<size_t>(i)];
        if (g.numel() == 0) continue;  // not on any path to the output
        const Tensor* va =
            nd.a >= 0 ? &vals[static_cast<size_t>(nd.a)] : nullptr;
        const Tensor* vb =
            nd.b >= 0 ? &vals[static_cast<size_t>(nd.b)] : nullptr;
        switch (nd.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::Identity:
                touch(nd.a).add_inplace(g);
                break;
            case Op::Add:
            case Op::Sub: {
                Tensor& ga = touch(nd.a);
                Tensor& gb = touch(nd.b);
                double sb = nd.op == Op::Sub ? -1.0 : 1.0;
                size_t r = g.rows(), c = g.cols();
                bool bc = vb->rows() == 1 && r > 1;
                for (size_t i2 = 0; i2 < r; ++i2)
                    for (size_t j = 0; j < c; ++j) {
                        ga[i2 * c + j] += g[i2 * c + j];
                        gb[(bc ? 0 : i2) * c + j] += sb * g[i2 * c + j];
                    }
                break;
            }
            case Op::Mul: {
                Tensor& ga = touch(nd.a);
                Tensor& gb = touch(nd.b);
                size_t r = g.rows(), c = g.cols();
                bool bc = vb->rows() == 1 && r > 1;
                for (size_t i2 = 0; i2 < r; ++i2)
                    for (size_t j = 0; j < c; ++j) {
                        double gv = g[i2 * c + j];
                        ga[i2 * c + j] += gv * (*vb)[(bc ? 0 : i2) * c + j];
                        gb[(bc ? 0 : i2) * c + j] += gv * (*va)[i2 * c + j];
                    }
                break;
            }
            case Op::Scale: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < g.numel(); ++j)
                    ga[j] += nd.scalar * g[j];
                break;
            }
            case Op::Matmul: {
                Tensor& ga = touch(nd.a);
                Tensor& gb = touch(nd.b);
                // d(A op B): four transpose layouts
                if (!nd.trans_a && !nd.trans_b) {
                    detail::matmul_into(g, *vb, false, true, ga, true);
                    detail::matmul_into(*va, g, true, false, gb, true);
                } else if (!nd.trans_a && nd.trans_b) {
                    detail::matmul_into(g, *vb, false, false, ga, true);
                    detail::matmul_into(g, *va, true, false, gb, true);
                } else if (nd.trans_a && !nd.trans_b) {
                    detail::matmul_into(*vb, g, false, true, ga, true);
                    detail::matmul_into(*va, g, false, false, gb, true);
                } else {
                    detail::matmul_into(*vb, g, true, true, ga, true);
                    detail::matmul_into(g, *va, true, true, gb, true);
                }
                break;
            }
            case Op::Gelu: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < g.numel(); ++j)
                    ga[j] += g[j] * detail::gelu_grad((*va)[j]);
                break;
            }
            case Op::Relu: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < g.numel(); ++j)
                    if ((*va)[j] > 0.0) ga[j] += g[j];
                break;
            }
            case Op::Sigmoid: {
                Tensor& ga = touch(nd.a);
                const Tensor& y = vals[static_cast<size_t>(i)];
                for (size_t j = 0; j < g.numel(); ++j)
                    ga[j] += g[j] * y[j] * (1.0 - y[j]);
                break;
            }
            case Op::LayerNorm: {
                Tensor& ga = touch(nd.a);
                const Tensor& y = vals[static_cast<size_t>(i)];
                size_t r = g.rows(), c = g.cols();
                double cn = static_cast<double>(c);
                for (size_t i2 = 0; i2 < r; ++i2) {
                    const double* x = va->data() + i2 * c;
                    const double* yo = y.data() + i2 * c;
                    const double* go = g.data() + i2 * c;
                    double mu = 0.0;
                    for (size_t j = 0; j < c; ++j) mu += x[j];
                    mu /= cn;
                    double var = 0.0;
                    for (size_t j = 0; j < c; ++j)
                        var += (x[j] - mu) * (x[j] - mu);
                    var /= cn;
                    double inv = 1.0 / std::sqrt(var + nd.scalar);
                    double gsum = 0.0, gy = 0.0;
                    for (size_t j = 0; j < c; ++j) {
                        gsum += go[j];
                        gy += go[j] * yo[j];
                    }
                    for (size_t j = 0; j < c; ++j)
                        ga[i2 * c + j] +=
                            inv * (go[j] - gsum / cn - yo[j] * gy / cn);
                }
                break;
            }
            case Op::Softmax: {
                Tensor& ga = touch(nd.a);
                const Tensor& y = vals[static_cast<size_t>(i)];
                size_t r = g.rows(), c = g.cols();
                for (size_t i2 = 0; i2 < r; ++i2) {
                    const double* yo = y.data() + i2 * c;
                    const double* go = g.data() + i2 * c;
                    double dotv = 0.0;
                    for (size_t j = 0; j < c; ++j) dotv += yo[j] * go[j];
                    for (size_t j = 0; j < c; ++j)
                        ga[i2 * c + j] += yo[j] * (go[j] - dotv);
                }
                break;
            }
            case Op::EmbedRows: {
                Tensor& ga = touch(nd.a);
                size_t c = va->cols();
                for (size_t i2 = 0; i2 < nd.ids.size(); ++i2) {
                    size_t tok = static_cast<size_t>(nd.ids[i2]);
                    for (size_t j = 0; j < c; ++j)
                        ga[tok * c + j] += g[i2 * c + j];
                }
                break;
            }
            case Op::RowGet: {
                Tensor& ga = touch(nd.a);
                size_t c = g.cols();
                for (size_t j = 0; j < c; ++j) ga[nd.i0 * c + j] += g[j];
                break;
            }
            case Op::RowSet: {
                Tensor& ga = touch(nd.a);
                Tensor& gb = touch(nd.b);
                size_t r = g.rows(), c = g.cols();
                for (size_t i2 = 0; i2 < r; ++i2)
                    for (size_t j = 0; j < c; ++j) {
                        if (i2 == nd.i0)
                            gb[j] += g[i2 * c + j];
                        else
                            ga[i2 * c + j] += g[i2 * c + j];
                    }
                break;
            }
            case Op::ConcatCols: {
                Tensor& ga = touch(nd.a);
                Tensor& gb = touch(nd.b);
                for (size_t j = 0; j < ga.numel(); ++j) ga[j] += g[j];
                for (size_t j = 0; j < gb.numel(); ++j)
                    gb[j] += g[ga.numel() + j];
                break;
            }
            case Op::SliceCols: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < nd.i1; ++j) ga[nd.i0 + j] += g[j];
                break;
            }
            case Op::Pick: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < nd.ids.size(); ++j)
                    ga[static_cast<size_t>(nd.ids[j])] += g[j];
                break;
            }
            case Op::Sum: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < ga.numel(); ++j) ga[j] += g[0];
                break;
            }
            case Op::SqSum: {
                Tensor& ga = touch(nd.a);
                for (size_t j = 0; j < ga.numel(); ++j)
                    ga[j] += 2.0 * (*va)[j] * g[0];
                break;
            }
            case Op::SoftmaxXent: {
                Tensor& ga = touch(nd.a);
                size_t c = va->cols();
                std::vector<double> p(c);
                size_t npairs = nd.ids.size() / 2;
                double w = g[0] / static_cast<double>(npairs);
                for (size_t j = 0; j < npairs; ++j) {
                    size_t row = static_cast<size_t>(nd.ids[2 * j]);
                    size_t tgt = static_cast<size_t>(nd.ids[2 * j + 1]);
                    detail::softmax_row(va->data() + row * c, p.data(), c);
                    for (size_t jj = 0; jj < c; ++jj)
                        ga[row * c + jj] +=
                            w * (p[jj] - (jj == tgt ? 1.0 : 0.0));
                }
                break;
            }
            case Op::XentSoft: {
                Tensor& ga = touch(nd.a);
                size_t c = va->cols();
                std::vector<double> p(c);
                detail::softmax_row(va->data(), p.data(), c);
                for (size_t j = 0; j < c; ++j)
                    ga[j] += g[0] * (p[j] - nd.payload[j]);
                break;
            }
        }
    }
    return grads;
}

// Central finite differences of a scalar function, the gradient-check oracle.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& fn,
                                const Tensor& point, double step) {
    if (step <= 0.0) throw Error("finite_difference: step must be > 0");
    Tensor grad(point.shape());
    Tensor x = point;
    for (size_t i = 0; i < x.numel(); ++i) {
        double orig = x[i];
        x[i] = orig + step;
        double fp = fn(x);
        x[i] = orig - step;
        double fm = fn(x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

}  // namespace cbench

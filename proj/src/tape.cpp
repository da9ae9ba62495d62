#include "filora/tape.hpp"

#include <algorithm>
#include <cmath>

namespace filora {

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu_scalar(double x) {
    double u = kGeluCoeff * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    double u = kGeluCoeff * (x + kGeluCubic * x * x * x);
    double t = std::tanh(u);
    double du = kGeluCoeff * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void Tape::check_exists(NodeId id) const {
    if (id >= nodes_.size()) throw ContractError("tape node id out of range");
}

NodeId Tape::push(Node node) {
    if (nodes_.capacity() == nodes_.size()) nodes_.reserve(nodes_.size() < 512 ? 1024 : nodes_.size() * 2);
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    check_exists(a);
    check_exists(b);
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows()) {
        throw ShapeError("matmul dimension mismatch: " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    }
    const std::size_t m = ta.rows(), k = ta.cols(), nn = tb.cols();
    Tensor out({m, nn});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            double av = ta.data()[i * k + l];
            if (av == 0.0) continue;
            const double* brow = tb.data() + l * nn;
            double* orow = out.data() + i * nn;
            for (std::size_t j = 0; j < nn; ++j) orow[j] += av * brow[j];
        }
    }
    Node n;
    n.op = Op::kMatMul;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.inputs = {a, b};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::matvec(NodeId w, NodeId x) {
    check_exists(w);
    check_exists(x);
    const Tensor& tw = nodes_[w].value;
    const Tensor& tx = nodes_[x].value;
    if (tw.rank() != 2 || tx.rank() != 1 || tw.cols() != tx.size()) {
        throw ShapeError("matvec dimension mismatch: " + shape_str(tw.shape()) + " x " + shape_str(tx.shape()));
    }
    const std::size_t m = tw.rows(), k = tw.cols();
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = tw.data() + i * k;
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += row[j] * tx.data()[j];
        out.data()[i] = acc;
    }
    Node n;
    n.op = Op::kMatVec;
    n.requires_grad = nodes_[w].requires_grad || nodes_[x].requires_grad;
    n.inputs = {w, x};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::matvec_transposed(NodeId a, NodeId x) {
    check_exists(a);
    check_exists(x);
    const Tensor& ta = nodes_[a].value;
    const Tensor& tx = nodes_[x].value;
    if (ta.rank() != 2 || tx.rank() != 1 || ta.rows() != tx.size()) {
        throw ShapeError("matvec_transposed dimension mismatch: " + shape_str(ta.shape()) + " x " +
                         shape_str(tx.shape()));
    }
    const std::size_t m = ta.rows(), r = ta.cols();
    Tensor out({r});
    for (std::size_t i = 0; i < m; ++i) {
        double xv = tx.data()[i];
        if (xv == 0.0) continue;
        const double* row = ta.data() + i * r;
        for (std::size_t j = 0; j < r; ++j) out.data()[j] += xv * row[j];
    }
    Node n;
    n.op = Op::kMatVecT;
    n.requires_grad = nodes_[a].requires_grad || nodes_[x].requires_grad;
    n.inputs = {a, x};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    check_exists(a);
    check_exists(b);
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    if (!ta.same_shape(tb)) {
        throw ShapeError("add shape mismatch: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
    Node n;
    n.op = Op::kAdd;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.inputs = {a, b};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
    check_exists(a);
    check_exists(b);
    const Tensor& ta = nodes_[a].value;
    const Tensor& tb = nodes_[b].value;
    if (!ta.same_shape(tb)) {
        throw ShapeError("mul shape mismatch: " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
    Node n;
    n.op = Op::kMul;
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.inputs = {a, b};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double c) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = c * tx[i];
    Node n;
    n.op = Op::kScale;
    n.requires_grad = nodes_[x].requires_grad;
    n.cval = c;
    n.inputs = {x};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::scale_by(NodeId x, NodeId scalar) {
    check_exists(x);
    check_exists(scalar);
    const Tensor& tx = nodes_[x].value;
    const Tensor& ts = nodes_[scalar].value;
    if (ts.size() != 1) {
        throw ShapeError("scale_by expects a one-element scalar node, got " + shape_str(ts.shape()));
    }
    double s = ts[0];
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = s * tx[i];
    Node n;
    n.op = Op::kScaleBy;
    n.requires_grad = nodes_[x].requires_grad || nodes_[scalar].requires_grad;
    n.inputs = {x, scalar};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::pick(NodeId x, std::size_t index) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    if (index >= tx.size()) {
        throw ShapeError("pick index " + std::to_string(index) + " out of range for " + shape_str(tx.shape()));
    }
    Node n;
    n.op = Op::kPick;
    n.requires_grad = nodes_[x].requires_grad;
    n.index = index;
    n.inputs = {x};
    n.value = Tensor::scalar(tx[index]);
    return push(std::move(n));
}

NodeId Tape::concat(std::span<const NodeId> parts) {
    if (parts.empty()) throw ContractError("concat of zero parts");
    std::size_t total = 0;
    for (NodeId id : parts) {
        check_exists(id);
        if (nodes_[id].value.rank() != 1) {
            throw ShapeError("concat expects 1-D parts, got " + shape_str(nodes_[id].value.shape()));
        }
        total += nodes_[id].value.size();
    }
    Tensor out({total});
    std::size_t off = 0;
    bool rg = false;
    for (NodeId id : parts) {
        const Tensor& t = nodes_[id].value;
        std::copy(t.data(), t.data() + t.size(), out.data() + off);
        off += t.size();
        rg = rg || nodes_[id].requires_grad;
    }
    Node n;
    n.op = Op::kConcat;
    n.requires_grad = rg;
    n.inputs.assign(parts.begin(), parts.end());
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId x) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = sigmoid_scalar(tx[i]);
    Node n;
    n.op = Op::kSigmoid;
    n.requires_grad = nodes_[x].requires_grad;
    n.inputs = {x};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::gelu(NodeId x) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = gelu_scalar(tx[i]);
    Node n;
    n.op = Op::kGelu;
    n.requires_grad = nodes_[x].requires_grad;
    n.inputs = {x};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::log_softmax(NodeId logits) {
    check_exists(logits);
    const Tensor& tx = nodes_[logits].value;
    if (tx.rank() != 1 || tx.size() == 0) {
        throw ShapeError("log_softmax expects a nonempty 1-D tensor, got " + shape_str(tx.shape()));
    }
    double m = tx[0];
    for (std::size_t i = 1; i < tx.size(); ++i) m = std::max(m, tx[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) s += std::exp(tx[i] - m);
    double lse = m + std::log(s);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) out[i] = tx[i] - lse;
    Node n;
    n.op = Op::kLogSoftmax;
    n.requires_grad = nodes_[logits].requires_grad;
    n.inputs = {logits};
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::size_t target) {
    check_exists(logits);
    const Tensor& tx = nodes_[logits].value;
    if (tx.rank() != 1 || tx.size() == 0) {
        throw ShapeError("cross_entropy expects a nonempty 1-D logits tensor, got " + shape_str(tx.shape()));
    }
    if (target >= tx.size()) {
        throw LabelError("cross_entropy target " + std::to_string(target) + " out of range [0, " +
                         std::to_string(tx.size()) + ")");
    }
    double m = tx[0];
    for (std::size_t i = 1; i < tx.size(); ++i) m = std::max(m, tx[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) s += std::exp(tx[i] - m);
    double lse = m + std::log(s);
    // Save softmax probabilities for the backward pass.
    Tensor probs(tx.shape());
    for (std::size_t i = 0; i < tx.size(); ++i) probs[i] = std::exp(tx[i] - lse);
    Node n;
    n.op = Op::kCrossEntropy;
    n.requires_grad = nodes_[logits].requires_grad;
    n.index = target;
    n.inputs = {logits};
    // Clamp the tiny negative rounding case only; NaN must propagate.
    const double loss = lse - tx[target];
    n.value = Tensor::scalar(loss < 0.0 ? 0.0 : loss);
    n.aux = std::move(probs);
    return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i];
    Node n;
    n.op = Op::kSum;
    n.requires_grad = nodes_[x].requires_grad;
    n.inputs = {x};
    n.value = Tensor::scalar(acc);
    return push(std::move(n));
}

NodeId Tape::add_n(std::span<const NodeId> parts) {
    if (parts.empty()) throw ContractError("add_n of zero parts");
    check_exists(parts[0]);
    Tensor out = nodes_[parts[0]].value;
    bool rg = nodes_[parts[0]].requires_grad;
    for (std::size_t p = 1; p < parts.size(); ++p) {
        check_exists(parts[p]);
        const Tensor& t = nodes_[parts[p]].value;
        if (!t.same_shape(out)) {
            throw ShapeError("add_n shape mismatch: " + shape_str(out.shape()) + " vs " + shape_str(t.shape()));
        }
        for (std::size_t i = 0; i < t.size(); ++i) out[i] += t[i];
        rg = rg || nodes_[parts[p]].requires_grad;
    }
    Node n;
    n.op = Op::kAddN;
    n.requires_grad = rg;
    n.inputs.assign(parts.begin(), parts.end());
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Tape::dot_const(NodeId x, Tensor weights) {
    check_exists(x);
    const Tensor& tx = nodes_[x].value;
    if (!tx.same_shape(weights)) {
        throw ShapeError("dot_const shape mismatch: " + shape_str(tx.shape()) + " vs " + shape_str(weights.shape()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i] * weights[i];
    Node n;
    n.op = Op::kDotConst;
    n.requires_grad = nodes_[x].requires_grad;
    n.inputs = {x};
    n.value = Tensor::scalar(acc);
    n.aux = std::move(weights);
    return push(std::move(n));
}

NodeId Tape::embedding_mean(NodeId table, std::span<const int> token_ids) {
    check_exists(table);
    const Tensor& tt = nodes_[table].value;
    if (tt.rank() != 2) throw ShapeError("embedding_mean expects a 2-D table, got " + shape_str(tt.shape()));
    if (token_ids.empty()) throw ContractError("embedding_mean of an empty token sequence");
    const std::size_t v = tt.rows(), d = tt.cols();
    Tensor out({d});
    for (int id : token_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw ShapeError("token id " + std::to_string(id) + " out of vocabulary range [0, " + std::to_string(v) +
                             ")");
        }
        const double* row = tt.data() + static_cast<std::size_t>(id) * d;
        for (std::size_t j = 0; j < d; ++j) out[j] += row[j];
    }
    double inv = 1.0 / static_cast<double>(token_ids.size());
    for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    Node n;
    n.op = Op::kEmbedMean;
    n.requires_grad = nodes_[table].requires_grad;
    n.inputs = {table};
    n.value = std::move(out);
    n.tokens.assign(token_ids.begin(), token_ids.end());
    return push(std::move(n));
}

const Tensor& Tape::grad(NodeId id) const {
    check_exists(id);
    if (!backward_done_) throw ContractError("grad() before backward()");
    if (!nodes_[id].requires_grad) throw ContractError("grad() on a node that does not require gradients");
    return nodes_[id].grad;
}

void Tape::backward(NodeId loss) {
    check_exists(loss);
    if (backward_done_) throw ContractError("backward() called twice on one tape");
    const Node& ln = nodes_[loss];
    if (ln.value.size() != 1) {
        throw ContractError("backward() requires a scalar loss node, got " + shape_str(ln.value.shape()));
    }
    for (Node& n : nodes_) {
        if (n.requires_grad) n.grad = Tensor(n.value.shape());
    }
    if (!nodes_[loss].requires_grad) {
        // Loss does not depend on any tracked parameter; nothing to do.
        backward_done_ = true;
        return;
    }
    nodes_[loss].grad[0] = 1.0;
    for (std::size_t pos = loss + 1; pos-- > 0;) {
        Node& n = nodes_[pos];
        if (!n.requires_grad || n.op == Op::kLeaf) continue;
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::kMatMul: {
                Node& na = nodes_[n.inputs[0]];
                Node& nb = nodes_[n.inputs[1]];
                const std::size_t m = na.value.rows(), k = na.value.cols(), nn = nb.value.cols();
                if (na.requires_grad) {
                    // dA += dC B^T
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t l = 0; l < k; ++l) {
                            double acc = 0.0;
                            for (std::size_t j = 0; j < nn; ++j)
                                acc += g.data()[i * nn + j] * nb.value.data()[l * nn + j];
                            na.grad.data()[i * k + l] += acc;
                        }
                }
                if (nb.requires_grad) {
                    // dB += A^T dC
                    for (std::size_t l = 0; l < k; ++l)
                        for (std::size_t j = 0; j < nn; ++j) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < m; ++i)
                                acc += na.value.data()[i * k + l] * g.data()[i * nn + j];
                            nb.grad.data()[l * nn + j] += acc;
                        }
                }
                break;
            }
            case Op::kMatVec: {
                Node& nw = nodes_[n.inputs[0]];
                Node& nx = nodes_[n.inputs[1]];
                const std::size_t m = nw.value.rows(), k = nw.value.cols();
                if (nw.requires_grad) {
                    for (std::size_t i = 0; i < m; ++i) {
                        double gi = g[i];
                        if (gi == 0.0) continue;
                        double* row = nw.grad.data() + i * k;
                        for (std::size_t j = 0; j < k; ++j) row[j] += gi * nx.value[j];
                    }
                }
                if (nx.requires_grad) {
                    for (std::size_t i = 0; i < m; ++i) {
                        double gi = g[i];
                        if (gi == 0.0) continue;
                        const double* row = nw.value.data() + i * k;
                        for (std::size_t j = 0; j < k; ++j) nx.grad[j] += gi * row[j];
                    }
                }
                break;
            }
            case Op::kMatVecT: {
                Node& na = nodes_[n.inputs[0]];
                Node& nx = nodes_[n.inputs[1]];
                const std::size_t m = na.value.rows(), r = na.value.cols();
                if (na.requires_grad) {
                    for (std::size_t i = 0; i < m; ++i) {
                        double xv = nx.value[i];
                        if (xv == 0.0) continue;
                        double* row = na.grad.data() + i * r;
                        for (std::size_t j = 0; j < r; ++j) row[j] += xv * g[j];
                    }
                }
                if (nx.requires_grad) {
                    for (std::size_t i = 0; i < m; ++i) {
                        const double* row = na.value.data() + i * r;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < r; ++j) acc += row[j] * g[j];
                        nx.grad[i] += acc;
                    }
                }
                break;
            }
            case Op::kAdd: {
                for (NodeId in : n.inputs) {
                    Node& ni = nodes_[in];
                    if (!ni.requires_grad) continue;
                    for (std::size_t i = 0; i < g.size(); ++i) ni.grad[i] += g[i];
                }
                break;
            }
            case Op::kMul: {
                Node& na = nodes_[n.inputs[0]];
                Node& nb = nodes_[n.inputs[1]];
                if (na.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * nb.value[i];
                if (nb.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) nb.grad[i] += g[i] * na.value[i];
                break;
            }
            case Op::kScale: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) nx.grad[i] += n.cval * g[i];
                break;
            }
            case Op::kScaleBy: {
                Node& nx = nodes_[n.inputs[0]];
                Node& ns = nodes_[n.inputs[1]];
                double s = ns.value[0];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) nx.grad[i] += s * g[i];
                if (ns.requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * nx.value[i];
                    ns.grad[0] += acc;
                }
                break;
            }
            case Op::kPick: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad) nx.grad[n.index] += g[0];
                break;
            }
            case Op::kConcat: {
                std::size_t off = 0;
                for (NodeId in : n.inputs) {
                    Node& ni = nodes_[in];
                    std::size_t len = ni.value.size();
                    if (ni.requires_grad)
                        for (std::size_t i = 0; i < len; ++i) ni.grad[i] += g[off + i];
                    off += len;
                }
                break;
            }
            case Op::kSigmoid: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        double y = n.value[i];
                        nx.grad[i] += g[i] * y * (1.0 - y);
                    }
                break;
            }
            case Op::kGelu: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) nx.grad[i] += g[i] * gelu_grad_scalar(nx.value[i]);
                break;
            }
            case Op::kLogSoftmax: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad) {
                    double gsum = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) gsum += g[i];
                    for (std::size_t i = 0; i < g.size(); ++i)
                        nx.grad[i] += g[i] - std::exp(n.value[i]) * gsum;
                }
                break;
            }
            case Op::kCrossEntropy: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad) {
                    double g0 = g[0];
                    for (std::size_t i = 0; i < n.aux.size(); ++i) {
                        double delta = (i == n.index) ? 1.0 : 0.0;
                        nx.grad[i] += g0 * (n.aux[i] - delta);
                    }
                }
                break;
            }
            case Op::kSum: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < nx.grad.size(); ++i) nx.grad[i] += g[0];
                break;
            }
            case Op::kAddN: {
                for (NodeId in : n.inputs) {
                    Node& ni = nodes_[in];
                    if (!ni.requires_grad) continue;
                    for (std::size_t i = 0; i < g.size(); ++i) ni.grad[i] += g[i];
                }
                break;
            }
            case Op::kDotConst: {
                Node& nx = nodes_[n.inputs[0]];
                if (nx.requires_grad)
                    for (std::size_t i = 0; i < n.aux.size(); ++i) nx.grad[i] += g[0] * n.aux[i];
                break;
            }
            case Op::kEmbedMean: {
                Node& nt = nodes_[n.inputs[0]];
                if (nt.requires_grad) {
                    const std::size_t d = nt.value.cols();
                    double inv = 1.0 / static_cast<double>(n.tokens.size());
                    for (int id : n.tokens) {
                        double* row = nt.grad.data() + static_cast<std::size_t>(id) * d;
                        for (std::size_t j = 0; j < d; ++j) row[j] += inv * g[j];
                    }
                }
                break;
            }
            case Op::kLeaf:
                break;
        }
    }
    backward_done_ = true;
}

}  // namespace filora

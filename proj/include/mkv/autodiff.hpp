#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mkv/errors.hpp"
#include "mkv/linalg.hpp"
#include "mkv/mat.hpp"

namespace mkv {

// Reverse-mode autodiff over whole matrices.  Forward values are computed
// eagerly as nodes are pushed; backward() walks the tape once in reverse.
// Everything is deterministic: the same sequence of pushes yields bit-equal
// values and gradients.

enum class OpKind : uint8_t {
  leaf,
  add,
  sub,
  mul,  // elementwise
  scalar_mul,
  matmul,
  transpose,
  concat_cols,
  slice_cols,
  slice_rows,
  softmax_rows,
  rms_norm_rows,
  embed_lookup,
  mat_inverse,
  cross_entropy_rows,
  kl_div_rows,
  kl_div_logits_rows,
  silu,
  rope_rows,
  skew_expand,
  sum_all,
};

struct Var {
  int id = -1;
  int rows = 0;
  int cols = 0;
};

class Tape {
 public:
  // --- leaves -------------------------------------------------------------
  Var leaf(Mat value, bool trainable = false) {
    Node n;
    n.op = OpKind::leaf;
    n.value = std::move(value);
    n.trainable = trainable;
    n.needs_grad = trainable;
    return push(std::move(n), "leaf");
  }
  Var constant(Mat value) { return leaf(std::move(value), false); }

  // --- elementwise and linear ops ------------------------------------------
  Var add(Var a, Var b) {
    Node n = binary(OpKind::add, a, b);
    n.value = mkv::add(val(a), val(b));
    return push(std::move(n), "add");
  }
  Var sub(Var a, Var b) {
    Node n = binary(OpKind::sub, a, b);
    n.value = mkv::sub(val(a), val(b));
    return push(std::move(n), "sub");
  }
  Var mul(Var a, Var b) {
    Node n = binary(OpKind::mul, a, b);
    n.value = hadamard(val(a), val(b));
    return push(std::move(n), "mul");
  }
  Var scalar_mul(double c, Var a) {
    Node n = unary(OpKind::scalar_mul, a);
    n.scalar = c;
    n.value = scale(val(a), c);
    return push(std::move(n), "scalar_mul");
  }
  Var matmul(Var a, Var b) {
    Node n = binary(OpKind::matmul, a, b);
    n.value = mkv::matmul(val(a), val(b));
    return push(std::move(n), "matmul");
  }
  Var transpose(Var a) {
    Node n = unary(OpKind::transpose, a);
    n.value = mkv::transpose(val(a));
    return push(std::move(n), "transpose");
  }
  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
    Node n;
    n.op = OpKind::concat_cols;
    int cols = 0;
    const int rows = parts[0].rows;
    for (const Var& p : parts) {
      if (p.rows != rows) throw ShapeMismatch("concat_cols: row mismatch");
      n.inputs.push_back(p.id);
      n.needs_grad = n.needs_grad || node(p).needs_grad;
      cols += p.cols;
    }
    n.value = Mat(rows, cols);
    int off = 0;
    for (const Var& p : parts) {
      const Mat& m = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < p.cols; ++j) n.value(i, off + j) = m(i, j);
      off += p.cols;
    }
    return push(std::move(n), "concat_cols");
  }
  Var slice_cols(Var a, int begin, int end) {
    Node n = unary(OpKind::slice_cols, a);
    n.i0 = begin;
    n.i1 = end;
    n.value = mkv::slice_cols(val(a), begin, end);
    return push(std::move(n), "slice_cols");
  }
  Var slice_rows(Var a, int begin, int end) {
    Node n = unary(OpKind::slice_rows, a);
    n.i0 = begin;
    n.i1 = end;
    n.value = mkv::slice_rows(val(a), begin, end);
    return push(std::move(n), "slice_rows");
  }

  // --- neural-net specific ops ----------------------------------------------
  Var softmax_rows(Var a) {
    Node n = unary(OpKind::softmax_rows, a);
    const Mat& z = val(a);
    n.value = Mat(z.rows(), z.cols());
    for (int i = 0; i < z.rows(); ++i) {
      double m = z(i, 0);
      for (int j = 1; j < z.cols(); ++j) m = std::max(m, z(i, j));
      double sum = 0.0;
      for (int j = 0; j < z.cols(); ++j) {
        n.value(i, j) = std::exp(z(i, j) - m);
        sum += n.value(i, j);
      }
      for (int j = 0; j < z.cols(); ++j) n.value(i, j) /= sum;
    }
    return push(std::move(n), "softmax_rows");
  }

  // y_ij = x_ij * gain_j / sqrt(mean_j(x_ij^2) + eps)
  Var rms_norm_rows(Var x, Var gain) {
    if (gain.rows != 1 || gain.cols != x.cols)
      throw ShapeMismatch("rms_norm_rows: gain must be 1 x cols(x)");
    Node n = binary(OpKind::rms_norm_rows, x, gain);
    const Mat& xv = val(x);
    const Mat& gv = val(gain);
    n.value = Mat(xv.rows(), xv.cols());
    n.aux = Mat(xv.rows(), 1);  // cached rms per row
    for (int i = 0; i < xv.rows(); ++i) {
      double ms = 0.0;
      for (int j = 0; j < xv.cols(); ++j) ms += xv(i, j) * xv(i, j);
      const double rms = std::sqrt(ms / xv.cols() + kRmsEps);
      n.aux(i, 0) = rms;
      for (int j = 0; j < xv.cols(); ++j) n.value(i, j) = xv(i, j) * gv(0, j) / rms;
    }
    return push(std::move(n), "rms_norm_rows");
  }

  Var embed_lookup(Var table, std::vector<int> ids) {
    Node n = unary(OpKind::embed_lookup, table);
    const Mat& t = val(table);
    n.value = Mat(int(ids.size()), t.cols());
    for (size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || ids[r] >= t.rows())
        throw ShapeMismatch("embed_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                            std::to_string(t.rows()) + " rows");
      for (int j = 0; j < t.cols(); ++j) n.value(int(r), j) = t(ids[r], j);
    }
    n.ints = std::move(ids);
    return push(std::move(n), "embed_lookup");
  }

  Var mat_inverse(Var a) {
    Node n = unary(OpKind::mat_inverse, a);
    n.value = mkv::mat_inverse(val(a));
    return push(std::move(n), "mat_inverse");
  }

  // Mean over rows of logsumexp(logits_i) - logits_i[target_i].
  Var cross_entropy_rows(Var logits, std::vector<int> targets) {
    if (int(targets.size()) != logits.rows)
      throw ShapeMismatch("cross_entropy_rows: one target per row required");
    Node n = unary(OpKind::cross_entropy_rows, logits);
    const Mat& z = val(logits);
    n.aux = Mat(z.rows(), z.cols());  // cached softmax
    double total = 0.0;
    for (int i = 0; i < z.rows(); ++i) {
      if (targets[i] < 0 || targets[i] >= z.cols())
        throw ShapeMismatch("cross_entropy_rows: target outside vocab");
      double m = z(i, 0);
      for (int j = 1; j < z.cols(); ++j) m = std::max(m, z(i, j));
      double sum = 0.0;
      for (int j = 0; j < z.cols(); ++j) sum += std::exp(z(i, j) - m);
      const double lse = m + std::log(sum);
      total += lse - z(i, targets[i]);
      for (int j = 0; j < z.cols(); ++j) n.aux(i, j) = std::exp(z(i, j) - lse);
    }
    n.ints = std::move(targets);
    n.value = Mat(1, 1, {total / z.rows()});
    return push(std::move(n), "cross_entropy_rows");
  }

  // Mean over rows of KL(p || q) where p is a constant probability matrix and
  // q is a probability-valued variable.  Probabilities are clamped at 1e-12
  // before any log.
  Var kl_div_rows(Mat teacher_probs, Var q) {
    if (teacher_probs.rows() != q.rows || teacher_probs.cols() != q.cols)
      throw ShapeMismatch("kl_div_rows: teacher shape " + shape_str(teacher_probs));
    Node n = unary(OpKind::kl_div_rows, q);
    const Mat& qv = val(q);
    double total = 0.0;
    for (int i = 0; i < teacher_probs.rows(); ++i)
      for (int j = 0; j < teacher_probs.cols(); ++j) {
        const double p = teacher_probs(i, j);
        if (p == 0.0) continue;
        total += p * (std::log(std::max(p, kProbFloor)) - std::log(std::max(qv(i, j), kProbFloor)));
      }
    n.value = Mat(1, 1, {total / teacher_probs.rows()});
    n.aux = std::move(teacher_probs);
    return push(std::move(n), "kl_div_rows");
  }

  // Same divergence but with the student given as logits; the log-softmax is
  // fused so no intermediate probability matrix is materialized on the tape.
  Var kl_div_logits_rows(Mat teacher_probs, Var logits) {
    if (teacher_probs.rows() != logits.rows || teacher_probs.cols() != logits.cols)
      throw ShapeMismatch("kl_div_logits_rows: teacher shape " + shape_str(teacher_probs));
    Node n = unary(OpKind::kl_div_logits_rows, logits);
    const Mat& z = val(logits);
    n.aux2 = Mat(z.rows(), z.cols());  // cached student softmax
    double total = 0.0;
    for (int i = 0; i < z.rows(); ++i) {
      double m = z(i, 0);
      for (int j = 1; j < z.cols(); ++j) m = std::max(m, z(i, j));
      double sum = 0.0;
      for (int j = 0; j < z.cols(); ++j) sum += std::exp(z(i, j) - m);
      const double lse = m + std::log(sum);
      for (int j = 0; j < z.cols(); ++j) {
        n.aux2(i, j) = std::exp(z(i, j) - lse);
        const double p = teacher_probs(i, j);
        if (p == 0.0) continue;
        total += p * (std::log(std::max(p, kProbFloor)) - (z(i, j) - lse));
      }
    }
    n.value = Mat(1, 1, {total / z.rows()});
    n.aux = std::move(teacher_probs);
    return push(std::move(n), "kl_div_logits_rows");
  }

  Var silu(Var a) {
    Node n = unary(OpKind::silu, a);
    const Mat& x = val(a);
    n.value = Mat(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < x.cols(); ++j) {
        const double s = 1.0 / (1.0 + std::exp(-x(i, j)));
        n.value(i, j) = x(i, j) * s;
      }
    return push(std::move(n), "silu");
  }

  // Rotary position embedding over column pairs (2k, 2k+1) with angle
  // pos * base^(-2k / cols).  positions[i] applies to row i.
  Var rope_rows(Var a, std::vector<int> positions, double base) {
    if (int(positions.size()) != a.rows)
      throw ShapeMismatch("rope_rows: one position per row required");
    if (a.cols % 2 != 0) throw ShapeMismatch("rope_rows: column count must be even");
    Node n = unary(OpKind::rope_rows, a);
    n.scalar = base;
    const Mat& x = val(a);
    n.value = Mat(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i)
      for (int k = 0; k < x.cols() / 2; ++k) {
        const double theta = positions[i] * std::pow(base, -2.0 * k / x.cols());
        const double c = std::cos(theta), s = std::sin(theta);
        const double x0 = x(i, 2 * k), x1 = x(i, 2 * k + 1);
        n.value(i, 2 * k) = x0 * c - x1 * s;
        n.value(i, 2 * k + 1) = x0 * s + x1 * c;
      }
    n.ints = std::move(positions);
    return push(std::move(n), "rope_rows");
  }

  // Strict-lower-triangle parameters (1 x d(d-1)/2) expanded to the full
  // skew-symmetric d x d matrix, matching SkewGenerator's layout.
  Var skew_expand(Var params, int dim) {
    if (params.rows != 1 || params.cols != int(SkewGenerator::param_count(dim)))
      throw ShapeMismatch("skew_expand: need 1 x " +
                          std::to_string(SkewGenerator::param_count(dim)) + " params");
    Node n = unary(OpKind::skew_expand, params);
    n.i0 = dim;
    const Mat& p = val(params);
    n.value = Mat(dim, dim);
    size_t k = 0;
    for (int i = 1; i < dim; ++i)
      for (int j = 0; j < i; ++j, ++k) {
        n.value(i, j) = p(0, int(k));
        n.value(j, i) = -p(0, int(k));
      }
    return push(std::move(n), "skew_expand");
  }

  Var sum_all(Var a) {
    Node n = unary(OpKind::sum_all, a);
    double s = 0.0;
    for (double v : val(a).data()) s += v;
    n.value = Mat(1, 1, {s});
    return push(std::move(n), "sum_all");
  }

  // --- access and backward -------------------------------------------------
  const Mat& value(Var v) const { return node(v).value; }
  size_t size() const { return nodes_.size(); }

  // Gradients of a scalar loss with respect to every trainable leaf that the
  // loss actually depends on, keyed by leaf id.
  std::map<int, Mat> backward(Var loss) const {
    const Node& ln = node(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw NotScalar("backward: loss is " + shape_str(ln.value));

    std::vector<Mat> adj(loss.id + 1);
    std::vector<char> has(size_t(loss.id) + 1, 0);
    adj[loss.id] = Mat(1, 1, {1.0});
    has[loss.id] = 1;

    auto acc = [&](int id, Mat g) {
      if (!nodes_[id].needs_grad) return;
      if (!has[id]) {
        adj[id] = std::move(g);
        has[id] = 1;
      } else {
        adj[id] = mkv::add(adj[id], g);
      }
    };

    for (int id = loss.id; id >= 0; --id) {
      if (!has[id] || !nodes_[id].needs_grad) continue;
      const Node& n = nodes_[id];
      const Mat& g = adj[id];
      switch (n.op) {
        case OpKind::leaf:
          break;
        case OpKind::add:
          acc(n.a, g);
          acc(n.b, g);
          break;
        case OpKind::sub:
          acc(n.a, g);
          acc(n.b, scale(g, -1.0));
          break;
        case OpKind::mul:
          acc(n.a, hadamard(g, nodes_[n.b].value));
          acc(n.b, hadamard(g, nodes_[n.a].value));
          break;
        case OpKind::scalar_mul:
          acc(n.a, scale(g, n.scalar));
          break;
        case OpKind::matmul:
          acc(n.a, mkv::matmul(g, mkv::transpose(nodes_[n.b].value)));
          acc(n.b, mkv::matmul(mkv::transpose(nodes_[n.a].value), g));
          break;
        case OpKind::transpose:
          acc(n.a, mkv::transpose(g));
          break;
        case OpKind::concat_cols: {
          int off = 0;
          for (int src : n.inputs) {
            const int w = nodes_[src].value.cols();
            acc(src, mkv::slice_cols(g, off, off + w));
            off += w;
          }
          break;
        }
        case OpKind::slice_cols: {
          Mat full(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
          for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < g.cols(); ++j) full(i, n.i0 + j) = g(i, j);
          acc(n.a, std::move(full));
          break;
        }
        case OpKind::slice_rows: {
          Mat full(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
          for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < g.cols(); ++j) full(n.i0 + i, j) = g(i, j);
          acc(n.a, std::move(full));
          break;
        }
        case OpKind::softmax_rows: {
          const Mat& y = n.value;
          Mat dz(y.rows(), y.cols());
          for (int i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (int j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
            for (int j = 0; j < y.cols(); ++j) dz(i, j) = y(i, j) * (g(i, j) - dot);
          }
          acc(n.a, std::move(dz));
          break;
        }
        case OpKind::rms_norm_rows: {
          const Mat& x = nodes_[n.a].value;
          const Mat& gain = nodes_[n.b].value;
          const int m = x.cols();
          Mat dx(x.rows(), m);
          Mat dgain(1, m);
          for (int i = 0; i < x.rows(); ++i) {
            const double rms = n.aux(i, 0);
            double inner = 0.0;  // sum_k g_ik * gain_k * x_ik
            for (int j = 0; j < m; ++j) inner += g(i, j) * gain(0, j) * x(i, j);
            for (int j = 0; j < m; ++j) {
              dx(i, j) = g(i, j) * gain(0, j) / rms - x(i, j) * inner / (m * rms * rms * rms);
              dgain(0, j) += g(i, j) * x(i, j) / rms;
            }
          }
          acc(n.a, std::move(dx));
          acc(n.b, std::move(dgain));
          break;
        }
        case OpKind::embed_lookup: {
          Mat dt(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
          for (size_t r = 0; r < n.ints.size(); ++r)
            for (int j = 0; j < dt.cols(); ++j) dt(n.ints[r], j) += g(int(r), j);
          acc(n.a, std::move(dt));
          break;
        }
        case OpKind::mat_inverse: {
          // Y = X^-1:  adj(X) += -Y^T * adj(Y) * Y^T
          const Mat yt = mkv::transpose(n.value);
          acc(n.a, scale(mkv::matmul(mkv::matmul(yt, g), yt), -1.0));
          break;
        }
        case OpKind::cross_entropy_rows: {
          const double go = g(0, 0) / n.aux.rows();
          Mat dz = scale(n.aux, go);
          for (size_t r = 0; r < n.ints.size(); ++r) dz(int(r), n.ints[r]) -= go;
          acc(n.a, std::move(dz));
          break;
        }
        case OpKind::kl_div_rows: {
          const Mat& q = nodes_[n.a].value;
          const double go = g(0, 0) / n.aux.rows();
          Mat dq(q.rows(), q.cols());
          for (int i = 0; i < q.rows(); ++i)
            for (int j = 0; j < q.cols(); ++j)
              if (q(i, j) > kProbFloor) dq(i, j) = -go * n.aux(i, j) / q(i, j);
          acc(n.a, std::move(dq));
          break;
        }
        case OpKind::kl_div_logits_rows: {
          const Mat& p = n.aux;
          const Mat& q = n.aux2;
          const double go = g(0, 0) / p.rows();
          Mat dz(p.rows(), p.cols());
          for (int i = 0; i < p.rows(); ++i) {
            double prow = 0.0;
            for (int j = 0; j < p.cols(); ++j) prow += p(i, j);
            for (int j = 0; j < p.cols(); ++j) dz(i, j) = go * (q(i, j) * prow - p(i, j));
          }
          acc(n.a, std::move(dz));
          break;
        }
        case OpKind::silu: {
          const Mat& x = nodes_[n.a].value;
          Mat dx(x.rows(), x.cols());
          for (int i = 0; i < x.rows(); ++i)
            for (int j = 0; j < x.cols(); ++j) {
              const double s = 1.0 / (1.0 + std::exp(-x(i, j)));
              dx(i, j) = g(i, j) * (s + x(i, j) * s * (1.0 - s));
            }
          acc(n.a, std::move(dx));
          break;
        }
        case OpKind::rope_rows: {
          // The adjoint rotates by the opposite angle.
          const Mat& x = nodes_[n.a].value;
          Mat dx(x.rows(), x.cols());
          for (int i = 0; i < x.rows(); ++i)
            for (int k = 0; k < x.cols() / 2; ++k) {
              const double theta = n.ints[i] * std::pow(n.scalar, -2.0 * k / x.cols());
              const double c = std::cos(theta), s = std::sin(theta);
              const double g0 = g(i, 2 * k), g1 = g(i, 2 * k + 1);
              dx(i, 2 * k) = g0 * c + g1 * s;
              dx(i, 2 * k + 1) = -g0 * s + g1 * c;
            }
          acc(n.a, std::move(dx));
          break;
        }
        case OpKind::skew_expand: {
          Mat dp(1, nodes_[n.a].value.cols());
          size_t k = 0;
          for (int i = 1; i < n.i0; ++i)
            for (int j = 0; j < i; ++j, ++k) dp(0, int(k)) = g(i, j) - g(j, i);
          acc(n.a, std::move(dp));
          break;
        }
        case OpKind::sum_all: {
          Mat dx(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
          for (auto& v : dx.data()) v = g(0, 0);
          acc(n.a, std::move(dx));
          break;
        }
      }
    }

    std::map<int, Mat> grads;
    for (int id = 0; id <= loss.id; ++id)
      if (nodes_[id].trainable && has[id]) grads.emplace(id, std::move(adj[id]));
    return grads;
  }

 private:
  static constexpr double kProbFloor = 1e-12;
  static constexpr double kRmsEps = 1e-6;

  struct Node {
    OpKind op = OpKind::leaf;
    int a = -1, b = -1;
    std::vector<int> inputs;  // concat_cols only
    std::vector<int> ints;    // token ids, targets, or positions
    double scalar = 0.0;      // scalar_mul factor or rope base
    int i0 = 0, i1 = 0;       // slice bounds or expansion dim
    Mat value;
    Mat aux, aux2;  // cached forward intermediates for the backward pass
    bool trainable = false;
    bool needs_grad = false;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= int(nodes_.size())) throw Error("tape: stale Var");
    return nodes_[v.id];
  }
  const Mat& val(Var v) const { return node(v).value; }

  Node unary(OpKind op, Var a) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.needs_grad = node(a).needs_grad;
    return n;
  }
  Node binary(OpKind op, Var a, Var b) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return n;
  }

  Var push(Node n, const char* opname) {
    if (!all_finite(n.value))
      throw NonFiniteValue(std::string(opname) + ": non-finite value produced");
    const Var v{int(nodes_.size()), n.value.rows(), n.value.cols()};
    nodes_.push_back(std::move(n));
    return v;
  }

  std::vector<Node> nodes_;
};

// Max relative error between analytic gradients and central finite
// differences.  `build` must deterministically construct the loss from the
// given leaves: grad_check re-runs it 2 * total_coordinates times.
template <class BuildFn>
double grad_check(BuildFn&& build, const std::vector<Mat>& params, double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Mat& p : params) leaves.push_back(tape.leaf(p, true));
  const Var loss = build(tape, leaves);
  const auto grads = tape.backward(loss);

  auto eval = [&](size_t pidx, size_t coord, double delta) {
    Tape t;
    std::vector<Var> l;
    l.reserve(params.size());
    for (size_t j = 0; j < params.size(); ++j) {
      Mat m = params[j];
      if (j == pidx) m.data()[coord] += delta;
      l.push_back(t.leaf(std::move(m), false));
    }
    return t.value(build(t, l))(0, 0);
  };

  double worst = 0.0;
  for (size_t pidx = 0; pidx < params.size(); ++pidx) {
    const auto it = grads.find(leaves[pidx].id);
    for (size_t c = 0; c < params[pidx].size(); ++c) {
      const double numeric = (eval(pidx, c, h) - eval(pidx, c, -h)) / (2.0 * h);
      const double analytic = it == grads.end() ? 0.0 : it->second.data()[c];
      worst = std::max(worst, std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric)));
    }
  }
  return worst;
}

}  // namespace mkv

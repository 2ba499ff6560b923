#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

// Reverse-mode automatic differentiation over row-major double matrices.
namespace map4ts::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Named parameters with gradient buffers. Value semantic, so a model copy is
// an independent model.
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Mat value, bool trainable);
  std::size_t index(const std::string& name) const;  // throws InvalidArgument
  bool contains(const std::string& name) const;

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Mat& value(std::size_t i) { return values_.at(i); }
  const Mat& value(std::size_t i) const { return values_.at(i); }
  Mat& grad(std::size_t i) { return grads_.at(i); }
  const Mat& grad(std::size_t i) const { return grads_.at(i); }
  bool trainable(std::size_t i) const { return trainable_.at(i) != 0; }
  void set_trainable(std::size_t i, bool on) { trainable_.at(i) = on ? 1 : 0; }

  void zero_grad();
  std::size_t trainable_count() const;  // scalar entries
  std::size_t total_count() const;
  // FNV-1a over names and value bytes, in insertion order.
  std::uint64_t hash() const;
  std::uint64_t hash_where(const std::function<bool(const std::string&)>& pick) const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::vector<Mat> grads_;
  std::vector<char> trainable_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  const Mat& grad() const;
  bool requires_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Attention probabilities recorded per head, each (queries x keys).
using AttentionRecord = std::vector<Mat>;

struct AttentionOptions {
  std::size_t heads = 1;
  bool causal = false;
  // Nonzero entries exclude that key from every query. Empty: all keys valid.
  std::vector<char> key_mask;
  AttentionRecord* record = nullptr;
};

class Tape {
 public:
  // With grad disabled no backward closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Mat value);
  Var leaf(Mat value, bool requires_grad);
  // One node per parameter per tape; requires grad iff trainable.
  Var param(const ParameterStore& store, std::size_t index);

  // Seeds d(out)/d(out) = 1; `out` must be 1x1.
  void backward(Var out);
  // Adds leaf gradients of parameter nodes into store.grad().
  void accumulate(ParameterStore& store) const;

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  const Mat& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Internal: used by op implementations.
  std::size_t next_id() const noexcept { return nodes_.size(); }
  std::size_t push(Mat value, bool requires_grad, std::function<void()> backward);
  Mat& grad_mut(std::size_t id);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };
  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_nodes_;  // store index -> node
  const ParameterStore* store_ = nullptr;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1xN row over every row of a
Var mul_scalar(Var a, double s);
Var gelu(Var a);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Fused multi-head scaled dot-product attention; q is MxD, k and v are NxD.
Var attention(Var q, Var k, Var v, const AttentionOptions& opts);
Var gather_rows(Var table, const std::vector<int>& ids);
Var rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
// out[i] = a[i - shift], zero where the source row is outside a.
Var shift_rows(Var a, Eigen::Index shift);
Var max_rows(Var a);  // column-wise max over rows -> 1xN; ties go to the first row
Var reshape(Var a, Eigen::Index r, Eigen::Index c);
Var sum(Var a);
Var mse(Var pred, const Mat& target);

double gelu_value(double x) noexcept;

}  // namespace map4ts::ag

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "sepo/autodiff/tensor.hpp"
#include "sepo/core/error.hpp"

namespace sepo::ad {

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::span<const T> data() const { return value().data(); }
    T item() const { return value()[0]; }
};

/// Reverse-mode tape. Ops append nodes in forward order; backward() replays
/// their adjoint closures in exact reverse order, once.
///
/// Parameters enter as leaves that alias a caller-owned Tensor; their
/// adjoints are add-assigned into that tensor's grad buffer, so callers zero
/// gradients between steps. A tape constructed with tracking disabled records
/// values only (inference mode) and refuses backward().
template <class T>
class Tape {
  public:
    using Backward = std::function<void(Tape&)>;

    explicit Tape(bool tracking = true) : tracking_(tracking) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool tracking() const noexcept { return tracking_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var<T> param(Tensor<T>& p) {
        Node n;
        n.param = &p;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var<T> constant(Tensor<T> v) { return record(std::move(v), nullptr); }

    /// Appends a node. `back` reads the node's adjoint via grad() and
    /// accumulates into its inputs' adjoints; ignored when not tracking.
    Var<T> record(Tensor<T> v, Backward back) {
        Node n;
        n.value = std::move(v);
        if (tracking_) n.backward = std::move(back);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(Var<T> v) const {
        const Node& n = nodes_[v.id];
        return n.param ? *n.param : n.value;
    }

    /// Adjoint buffer of a node. Valid during and after backward().
    std::span<T> grad(Var<T> v) {
        Node& n = nodes_[v.id];
        if (n.param) return n.param->grad();
        return n.grad;
    }

    std::span<const T> grad(Var<T> v) const {
        const Node& n = nodes_[v.id];
        if (n.param) return n.param->grad();
        return n.grad;
    }

    void backward(Var<T> loss) {
        if (!tracking_) throw UsageError("backward() on a tape recorded in inference mode");
        if (consumed_) throw UsageError("backward() called twice on the same tape; re-record the forward pass");
        if (value(loss).size() != 1)
            throw UsageError("backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
        consumed_ = true;
        for (Node& n : nodes_)
            if (!n.param) n.grad.assign(n.value.size(), T{0});
        grad(loss)[0] += T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward) n.backward(*this);
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T>* param = nullptr;
        std::vector<T> grad;
        Backward backward;
    };

    std::vector<Node> nodes_;
    bool tracking_;
    bool consumed_ = false;
};

} // namespace sepo::ad

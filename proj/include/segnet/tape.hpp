#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "segnet/tensor.hpp"

namespace segnet {

// Reverse-mode tape over a dynamically recorded graph. One tape per training
// step, confined to a single worker. Backward rules are closures that read the
// output grad buffer and accumulate (+=) into input grad buffers, so replaying
// every record in reverse order is exactly reverse-mode accumulation: nodes the
// root does not reach keep a zero output grad and contribute nothing.
template <class T>
class Tape {
public:
    // Registers a leaf (parameter or input that wants gradients). Keeps an
    // existing grad buffer so parameter grads persist across steps; zeroing is
    // the caller's explicit zero_grad.
    int watch(Tensor<T>& t) {
        t.ensure_grad();
        t.set_node(next_node_++);
        return t.node();
    }

    // Records one op: input node ids (-1 marks a constant), output node id and
    // the backward rule. The output gets a fresh zeroed grad buffer.
    int record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out,
               std::function<void()> backward) {
        return record(std::vector<const Tensor<T>*>(inputs), out, std::move(backward));
    }

    int record(const std::vector<const Tensor<T>*>& inputs, Tensor<T>& out,
               std::function<void()> backward) {
        OpRec rec;
        for (const Tensor<T>* in : inputs) rec.inputs.push_back(in->has_grad() ? in->node() : -1);
        out.ensure_grad();
        out.set_node(next_node_++);
        rec.output = out.node();
        rec.backward = std::move(backward);
        const int id = rec.output;
        ops_.push_back(std::move(rec));
        return id;
    }

    void backward(Tensor<T>& root) {
        if (root.numel() != 1) {
            throw shape_error("backward root must be scalar, got shape " + shape_str(root.shape()));
        }
        if (!root.has_grad() || root.node() < 0) {
            throw shape_error("backward root is not attached to the tape");
        }
        root.grad()[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
    }

    size_t size() const { return ops_.size(); }
    int num_nodes() const { return next_node_; }

    // Every op's inputs were recorded (or watched) before its output.
    bool topology_ok() const {
        for (const OpRec& op : ops_) {
            for (int in : op.inputs) {
                if (in >= op.output) return false;
            }
        }
        return true;
    }

private:
    struct OpRec {
        std::vector<int> inputs;
        int output = -1;
        std::function<void()> backward;
    };
    std::vector<OpRec> ops_;
    int next_node_ = 0;
};

}  // namespace segnet

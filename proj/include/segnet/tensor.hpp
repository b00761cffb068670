#pragma once

#include <algorithm>
#include <memory>
#include <vector>

#include "segnet/shape.hpp"

namespace segnet {

// Dense row-major N-d array (batches use NCHW). Copies are shallow: data, the
// lazily allocated grad buffer and the tape node handle live in one shared
// storage block, so a registry entry and the layer that owns the parameter are
// one logical tensor no matter when grad gets allocated. Values are treated as
// immutable once created except for parameters, which the optimizer updates
// between tape lifetimes.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
        st_->data.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape_)) {
            throw shape_error("tensor data size " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape_));
        }
        st_->data = std::move(values);
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.st_->data.begin(), t.st_->data.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    bool defined() const { return st_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return st_ ? static_cast<int64_t>(st_->data.size()) : 0; }

    T* data() const { return st_->data.data(); }
    std::vector<T>& values() const { return st_->data; }

    bool has_grad() const { return st_ && !st_->grad.empty(); }
    T* grad() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }
    std::vector<T>& grad_values() const { return st_->grad; }

    // Allocates (zeroed) lazily; a tensor never watched by or produced on a
    // tape never allocates grad.
    void ensure_grad() const {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
    }

    void zero_grad() const {
        std::fill(st_->grad.begin(), st_->grad.end(), T(0));
    }

    int node() const { return st_->node; }
    void set_node(int id) const { st_->node = id; }

    // NCHW element access for tests and small kernels.
    T at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return st_->data[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

private:
    struct Storage {
        std::vector<T> data;
        std::vector<T> grad;  // empty until ensure_grad
        int node = -1;
    };
    Shape shape_;
    std::shared_ptr<Storage> st_;
};

}  // namespace segnet

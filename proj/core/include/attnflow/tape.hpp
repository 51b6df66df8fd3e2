#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "attnflow/tensor.hpp"

namespace attnflow {

// Append-only gradient tape. Built during one forward pass, consumed by one
// backward() call, then discarded; no retained graphs. A tape is single-owner:
// it must not be shared between threads.
class Tape {
public:
    // Reads the adjoint of `self` via adjoint(self) and accumulates
    // contributions into input nodes via accumulate().
    using BackwardFn = std::function<void(Tape&, int self)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t epoch() const { return epoch_; }

    // Registers a leaf (parameter or input) by address, without touching the
    // tensor itself, so one set of parameters can be watched concurrently by
    // tapes on different threads. The tensor must outlive the tape. Watching
    // the same tensor twice returns the existing node.
    int watch(const Tensor& t);

    bool tracks(const Tensor& t) const { return node_of(t) >= 0; }
    int node_of(const Tensor& t) const {
        if (t.tape_epoch == epoch_ && t.tape_id >= 0 &&
            t.tape_id < static_cast<int>(nodes_.size())) {
            return t.tape_id;
        }
        const auto it = watched_.find(&t);
        return it == watched_.end() ? -1 : it->second;
    }

    // Records a node with its output values; marks `out` as tracked.
    int emit(Tensor& out, BackwardFn fn);

    const std::vector<double>& value(int id) const { return values_[id]; }
    const Shape& shape_of(int id) const { return shapes_[id]; }

    // Reverse accumulation from a scalar root, in reverse topological order.
    void backward(const Tensor& root);

    // Accumulated adjoint of a watched/emitted tensor; zeros if unreached.
    Tensor grad(const Tensor& t) const;

    const std::vector<double>& adjoint(int id) const;
    void accumulate(int id, const std::vector<double>& contribution);

    std::size_t node_count() const { return nodes_.size(); }

private:
    static std::atomic<std::uint64_t> next_epoch_;
    std::uint64_t epoch_;
    std::vector<BackwardFn> nodes_;
    std::vector<Shape> shapes_;
    std::vector<std::vector<double>> values_;
    std::vector<std::vector<double>> adj_;
    std::unordered_map<const Tensor*, int> watched_;
    bool ran_backward_ = false;
};

// Thread-local active tape. Ops record onto it when set.
Tape* active_tape();

// RAII guard installing a tape as the thread's active tape.
class TapeScope {
public:
    explicit TapeScope(Tape& t);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Value saved for a backward rule: either a node reference (tracked input)
// or an owned copy (constant operand).
struct Saved {
    int id = -1;
    std::shared_ptr<const std::vector<double>> held;

    const std::vector<double>& get(const Tape& t) const { return id >= 0 ? t.value(id) : *held; }
};

Saved save_input(Tape* tp, const Tensor& t);

}  // namespace attnflow

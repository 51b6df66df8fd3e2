#include "attnflow/tape.hpp"

namespace attnflow {

std::atomic<std::uint64_t> Tape::next_epoch_{1};

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape::Tape() : epoch_(next_epoch_.fetch_add(1)) {}

int Tape::watch(const Tensor& t) {
    const int existing = node_of(t);
    if (existing >= 0) return existing;
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();  // leaf: no backward rule
    shapes_.push_back(t.shape);
    values_.push_back(t.data);
    watched_.emplace(&t, id);
    return id;
}

int Tape::emit(Tensor& out, BackwardFn fn) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(fn));
    shapes_.push_back(out.shape);
    values_.push_back(out.data);
    out.tape_id = id;
    out.tape_epoch = epoch_;
    return id;
}

const std::vector<double>& Tape::adjoint(int id) const { return adj_[id]; }

void Tape::accumulate(int id, const std::vector<double>& contribution) {
    if (id < 0) return;
    auto& a = adj_[id];
    if (a.empty()) {
        a = contribution;
        return;
    }
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += contribution[i];
}

void Tape::backward(const Tensor& root) {
    const int root_id = node_of(root);
    if (root_id < 0) throw Error("backward: root is not on this tape");
    if (root.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got " + root.shape.str());
    }
    adj_.assign(nodes_.size(), {});
    adj_[root_id] = {1.0};
    for (int i = root_id; i >= 0; --i) {
        if (adj_[i].empty()) continue;
        if (nodes_[i]) nodes_[i](*this, i);
    }
    ran_backward_ = true;
}

Tensor Tape::grad(const Tensor& t) const {
    const int id = node_of(t);
    if (id < 0) throw Error("grad: tensor is not on this tape");
    if (!ran_backward_) throw Error("grad: backward has not run");
    const auto& a = adj_[id];
    if (a.empty()) return Tensor(t.shape, 0.0);
    return Tensor(t.shape, a);
}

Saved save_input(Tape* tp, const Tensor& t) {
    if (tp) {
        const int id = tp->node_of(t);
        if (id >= 0) return Saved{id, nullptr};
    }
    return Saved{-1, std::make_shared<const std::vector<double>>(t.data)};
}

}  // namespace attnflow

#include "mmseq/tape.hpp"

#include "mmseq/common.hpp"

namespace mmseq {

void Tape::record(std::vector<Tensor> inputs, Tensor output,
                  std::function<void(const Entry&)> backward) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
    MMSEQ_CHECK(root.defined() && root.size() == 1,
                "backward root must be a scalar tensor");
    if (!root.requires_grad()) return;  // constant graph: grads stay absent
    // Intermediate grads are per-pass: clear every op output so a replay
    // contributes exactly one more unit seed to the leaves.
    for (Entry& e : entries_) e.output.zero_grad();
    Tensor seed = root;
    seed.grad_or_alloc()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output.has_grad()) it->backward(*it);
    }
}

}  // namespace mmseq

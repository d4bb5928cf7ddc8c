#pragma once

#include <functional>
#include <vector>

#include "mmseq/tensor.hpp"

namespace mmseq {

/// Record of executed operations in execution order. Reverse-mode
/// accumulation walks the record backwards and adds into the grad
/// buffers of each entry's inputs, so running backward() twice without
/// zeroing doubles the gradients. A tape is confined to one thread.
class Tape {
public:
    struct Entry {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void(const Entry&)> backward;
    };

    void record(std::vector<Tensor> inputs, Tensor output,
                std::function<void(const Entry&)> backward);

    /// Seeds d(root)/d(root) = 1 and accumulates gradients into every
    /// requires_grad tensor reachable from root. Root must be scalar.
    void backward(const Tensor& root);

    std::size_t size() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    void clear() { entries_.clear(); }

private:
    std::vector<Entry> entries_;
};

}  // namespace mmseq

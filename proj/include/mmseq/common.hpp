#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace mmseq {

// Violated precondition or type invariant.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// File or stream level failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad run configuration detected at startup.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string format_msg(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace detail

}  // namespace mmseq

#define MMSEQ_CHECK(cond, ...)                                              \
    do {                                                                    \
        if (!(cond)) {                                                      \
            throw ::mmseq::ContractError(::mmseq::detail::format_msg(__VA_ARGS__)); \
        }                                                                   \
    } while (0)

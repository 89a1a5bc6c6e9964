#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace tempo {

// All recoverable failures in the library surface as tempo::Error.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}

template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  throw Error(os.str());
}

}  // namespace tempo

// Cheap precondition check; message parts are streamed only on failure.
#define TEMPO_CHECK(cond, ...)            \
  do {                                    \
    if (!(cond)) ::tempo::fail(__VA_ARGS__); \
  } while (0)

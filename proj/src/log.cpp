#include <iostream>
#include <mutex>

#include "cdrec/types.hpp"

namespace cdrec::log {

namespace {

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

Sink& sink() {
    static Sink s = [](const std::string& message) { std::cerr << "warning: " << message << '\n'; };
    return s;
}

}  // namespace

Sink set_warning_sink(Sink next) {
    std::lock_guard lock(sink_mutex());
    Sink previous = std::move(sink());
    sink() = std::move(next);
    return previous;
}

void warn(const std::string& message) {
    std::lock_guard lock(sink_mutex());
    if (sink()) {
        sink()(message);
    }
}

}  // namespace cdrec::log

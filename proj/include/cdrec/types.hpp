#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace cdrec {

using UserId = std::int32_t;
using ItemId = std::int32_t;

// Sentinels stored in sequence slots. Real item ids are always >= 0.
inline constexpr ItemId kPad = -1;
inline constexpr ItemId kMask = -2;

inline bool is_item(ItemId v) { return v >= 0; }

// Row-major so that embedding rows are contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class EmptyDatasetError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

namespace log {

using Sink = std::function<void(const std::string&)>;

// Replaces the warning sink (stderr by default); returns the previous one.
Sink set_warning_sink(Sink sink);
void warn(const std::string& message);

}  // namespace log

}  // namespace cdrec

// Copyright (C) 2026 The kvretain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace kvretain {

// Exit codes used by the command-line tool. Each error class maps to one.
enum class ErrorKind : int {
    Internal = 1,
    Usage = 2,
    Io = 3,
    Schema = 4,
    Validation = 5,
};

inline const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::Internal: return "internal";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Io: return "io";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Validation: return "validation";
    }
    return "internal";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), m_kind(kind) {}
    ErrorKind kind() const noexcept { return m_kind; }

private:
    ErrorKind m_kind;
};

/// A precondition on an operation's input does not hold.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

/// An input file parsed but does not match the expected layout.
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& what) : Error(ErrorKind::Schema, what) {}
};

/// An input could not be read or an output could not be written.
class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

#define KVRETAIN_CHECK(cond, msg)                                                                  \
    do {                                                                                           \
        if (!(cond)) {                                                                             \
            throw ::kvretain::ValidationError(msg);                                                \
        }                                                                                          \
    } while (0)

} // namespace kvretain

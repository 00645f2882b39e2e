// Copyright 2026 The cpm4kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cpm4 {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Container bytes that do not parse (bad magic, version, header JSON).
class FormatError : public Error {
public:
    using Error::Error;
};

// Structurally readable data that violates a shape or config invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

#define CPM4_REQUIRE(cond, ExcType, msg)                                   \
    do {                                                                   \
        if (!(cond)) throw ExcType(std::string(msg));                      \
    } while (0)

} // namespace cpm4

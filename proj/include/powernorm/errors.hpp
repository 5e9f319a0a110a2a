#pragma once

#include <stdexcept>
#include <string>

namespace powernorm {

// Base of every error the library raises. Callers that only care about
// "something went wrong in powernorm" catch this; the subclasses name the
// contract that was violated.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class EmptyBatch : public Error {
public:
    using Error::Error;
};

class UninitializedState : public Error {
public:
    using Error::Error;
};

class StaleCache : public Error {
public:
    using Error::Error;
};

class InstrumentationDisabled : public Error {
public:
    using Error::Error;
};

class DivisionByZero : public Error {
public:
    using Error::Error;
};

class NumericalFailure : public Error {
public:
    using Error::Error;
};

class DegenerateColumn : public Error {
public:
    using Error::Error;
};

class InvalidConfig : public Error {
public:
    using Error::Error;
};

class EmptyCorpus : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace powernorm

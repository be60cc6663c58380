#pragma once

#include <stdexcept>
#include <string>

namespace sentiscope {

// Base of every error raised by the library. Subclasses exist so callers and
// tests can tell failure classes apart; the message always carries the detail.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class parse_error : public error {
public:
    using error::error;
};

class integrity_error : public error {
public:
    using error::error;
};

class domain_error : public error {
public:
    using error::error;
};

class length_error : public error {
public:
    using error::error;
};

class missing_tensor_error : public error {
public:
    using error::error;
};

class shape_error : public error {
public:
    using error::error;
};

class alignment_error : public error {
public:
    using error::error;
};

class training_error : public error {
public:
    using error::error;
};

class divergence_error : public training_error {
public:
    using training_error::training_error;
};

class generation_error : public error {
public:
    using error::error;
};

class incomplete_report_error : public error {
public:
    using error::error;
};

class io_error : public error {
public:
    using error::error;
};

// Wraps an error with the pipeline stage it came from.
class stage_error : public error {
public:
    stage_error(std::string stage, const std::string& what)
        : error("[" + stage + "] " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace sentiscope

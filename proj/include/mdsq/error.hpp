#pragma once

#include <stdexcept>
#include <string>

namespace mdsq {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    kOk = 0,
    kValidation = 1,
    kIo = 2,
    kNumeric = 3,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ExitCode code = ExitCode::kValidation)
        : std::runtime_error(what), code_(code)
    {
    }
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

#define MDSQ_DEFINE_ERROR(Name, Code)                                                   \
    class Name : public Error {                                                         \
    public:                                                                             \
        explicit Name(const std::string& what) : Error(#Name ": " + what, Code) {}      \
    }

MDSQ_DEFINE_ERROR(DimensionError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(RankError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(DegenerateRowError, ExitCode::kNumeric);
MDSQ_DEFINE_ERROR(ConfigError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(VocabularyError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(LineFormatError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(EncodingError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(LengthError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(BatchError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(OrderingError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(EvalError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(CompatibilityError, ExitCode::kValidation);
MDSQ_DEFINE_ERROR(IoError, ExitCode::kIo);
MDSQ_DEFINE_ERROR(NumericError, ExitCode::kNumeric);

#undef MDSQ_DEFINE_ERROR

} // namespace mdsq

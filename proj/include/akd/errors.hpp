#pragma once

#include <stdexcept>
#include <string>

namespace akd {

// Base for every library error. Each concrete type corresponds to one
// failure condition named in the operation contracts.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define AKD_DEFINE_ERROR(Name)                                    \
    struct Name : Error {                                         \
        explicit Name(const std::string& msg) : Error(msg) {}     \
    }

AKD_DEFINE_ERROR(ShapeMismatch);
AKD_DEFINE_ERROR(DomainError);
AKD_DEFINE_ERROR(AllMaskedRow);
AKD_DEFINE_ERROR(InvalidTokenId);
AKD_DEFINE_ERROR(EmptyMask);
AKD_DEFINE_ERROR(NonScalarRoot);
AKD_DEFINE_ERROR(NonDeterministicFunction);
AKD_DEFINE_ERROR(IndivisibleGrouping);
AKD_DEFINE_ERROR(SequenceTooLong);
AKD_DEFINE_ERROR(EmptySequence);
AKD_DEFINE_ERROR(NotCausal);
AKD_DEFINE_ERROR(BadPartition);
AKD_DEFINE_ERROR(NegativeAttention);
AKD_DEFINE_ERROR(BadK);
AKD_DEFINE_ERROR(IndexOutOfRange);
AKD_DEFINE_ERROR(NegativeLambda);
AKD_DEFINE_ERROR(VocabMismatch);
AKD_DEFINE_ERROR(NonFiniteComponent);
AKD_DEFINE_ERROR(IoError);
AKD_DEFINE_ERROR(ParseError);
AKD_DEFINE_ERROR(EmptyDataset);
AKD_DEFINE_ERROR(BadSchedule);
AKD_DEFINE_ERROR(NonFiniteLoss);
AKD_DEFINE_ERROR(ZeroVector);
AKD_DEFINE_ERROR(ConfigError);

#undef AKD_DEFINE_ERROR

}  // namespace akd

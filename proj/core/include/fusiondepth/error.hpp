#pragma once

#include <stdexcept>
#include <string>

namespace fusiondepth {

/// Base of every exception raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor / autodiff
class InvalidShape : public Error { public: using Error::Error; };
class ShapeMismatch : public Error { public: using Error::Error; };
class NonFinite : public Error { public: using Error::Error; };
class EmptyMask : public Error { public: using Error::Error; };
class NotScalar : public Error { public: using Error::Error; };
class NotOnTape : public Error { public: using Error::Error; };

// Layers
class DegenerateBatch : public Error { public: using Error::Error; };

// Scene simulation
class InvalidScene : public Error { public: using Error::Error; };

// File I/O
class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class AlignmentError : public Error { public: using Error::Error; };

// Training / configuration
class MissingGradient : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };

/// Raised by the training loop when a loss term stops being finite.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, int epoch, int batch, std::string term)
      : Error(what), epoch_(epoch), batch_(batch), term_(std::move(term)) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }
  const std::string& term() const { return term_; }

 private:
  int epoch_;
  int batch_;
  std::string term_;
};

}  // namespace fusiondepth

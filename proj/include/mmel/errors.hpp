#pragma once

#include <stdexcept>
#include <string>

namespace mmel {

// Every error raised by the library derives from Error so callers can catch
// the whole family; the subclasses exist so tests and the CLI can tell the
// failure classes apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class OrderingError : public Error { using Error::Error; };
class UndefinedCorrelationError : public Error { using Error::Error; };
class ConsistencyError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class NormalizationError : public Error { using Error::Error; };
class EvaluationError : public Error { using Error::Error; };

// Weight file ("MMELW1") load failures.
class WeightFileError : public Error { using Error::Error; };
class WeightMagicError : public WeightFileError { using WeightFileError::WeightFileError; };
class WeightTruncatedError : public WeightFileError { using WeightFileError::WeightFileError; };
class WeightDirectoryError : public WeightFileError { using WeightFileError::WeightFileError; };

// PPM/PGM failures.
class ImageError : public Error { using Error::Error; };
class ImageMagicError : public ImageError { using ImageError::ImageError; };
class ImageTruncatedError : public ImageError { using ImageError::ImageError; };
class ImageMaxvalError : public ImageError { using ImageError::ImageError; };
class ImageSizeError : public ImageError { using ImageError::ImageError; };

}  // namespace mmel

#ifndef BIMAPPER_ERROR_HPP
#define BIMAPPER_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bimapper {

// Base of every exception the library throws. The CLI maps the category to
// its exit code.
class Error : public std::runtime_error {
public:
	enum class Category { Usage, Numeric, Io };

	Error(Category category, const std::string& what)
		: std::runtime_error(what), category_(category) {}

	[[nodiscard]] Category category() const noexcept { return category_; }

private:
	Category category_;
};

#define BIMAPPER_DEFINE_ERROR(Name, Cat)                                  \
	class Name : public Error {                                           \
	public:                                                               \
		explicit Name(const std::string& what)                            \
			: Error(Category::Cat, std::string(#Name ": ") + what) {}     \
	}

BIMAPPER_DEFINE_ERROR(NonPositiveDepth, Numeric);
BIMAPPER_DEFINE_ERROR(HorizonSingularity, Numeric);
BIMAPPER_DEFINE_ERROR(InvalidArgument, Usage);
BIMAPPER_DEFINE_ERROR(DegeneratePolyline, Usage);
BIMAPPER_DEFINE_ERROR(ShapeMismatch, Usage);
BIMAPPER_DEFINE_ERROR(NonScalarLoss, Usage);
BIMAPPER_DEFINE_ERROR(ViewCountMismatch, Usage);
BIMAPPER_DEFINE_ERROR(ArchMismatch, Usage);
BIMAPPER_DEFINE_ERROR(DatasetEmpty, Usage);
BIMAPPER_DEFINE_ERROR(NonFiniteLoss, Numeric);
BIMAPPER_DEFINE_ERROR(IoError, Io);

#undef BIMAPPER_DEFINE_ERROR

} // namespace bimapper

#endif

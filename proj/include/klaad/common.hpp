#pragma once

#include <stdexcept>
#include <string>

namespace klaad {

// Error hierarchy shared across the library. CLI maps these to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : Error { using Error::Error; };       // malformed input file
struct ValidationError : Error { using Error::Error; };  // schema/contract violation
struct ConfigError : Error { using Error::Error; };      // invalid configuration
struct NumericError : Error { using Error::Error; };     // non-finite value produced
struct CheckpointError : Error { using Error::Error; };  // bad checkpoint file
struct IoError : Error { using Error::Error; };          // filesystem failure
struct LengthError : Error { using Error::Error; };      // sequence budget exceeded
struct InputError : Error { using Error::Error; };       // bad operation input

// Half-open token index range [begin, end).
struct Span {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool contains(int i) const { return i >= begin && i < end; }
    bool operator==(const Span&) const = default;
};

enum class Subset { intrasentence, intersentence };
enum class Category { gender, race, religion, profession };

inline const char* to_string(Subset s) {
    return s == Subset::intrasentence ? "intrasentence" : "intersentence";
}

inline const char* to_string(Category c) {
    switch (c) {
        case Category::gender: return "gender";
        case Category::race: return "race";
        case Category::religion: return "religion";
        case Category::profession: return "profession";
    }
    return "?";
}

inline Subset subset_from_string(const std::string& s) {
    if (s == "intrasentence") return Subset::intrasentence;
    if (s == "intersentence") return Subset::intersentence;
    throw ValidationError("unknown subset: " + s);
}

inline Category category_from_string(const std::string& s) {
    if (s == "gender") return Category::gender;
    if (s == "race") return Category::race;
    if (s == "religion") return Category::religion;
    if (s == "profession") return Category::profession;
    throw ValidationError("unknown category: " + s);
}

}  // namespace klaad

#include "stx/common.hpp"

namespace stx {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Parse: return "parse";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Schema: return "schema";
        case ErrorKind::Integrity: return "integrity";
        case ErrorKind::Argument: return "argument";
        case ErrorKind::EmptyDataset: return "empty-dataset";
        case ErrorKind::InsufficientTissue: return "insufficient-tissue";
        case ErrorKind::DegenerateStain: return "degenerate-stain";
        case ErrorKind::Constraint: return "constraint";
        case ErrorKind::Config: return "config";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::Contract: return "contract";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(delim, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto* ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

}  // namespace stx

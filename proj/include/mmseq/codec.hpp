#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mmseq::codec {

using TokenId = std::uint32_t;

// Token id layout, contiguous per class:
//   [0, 256)    byte tokens
//   [256, 263)  special tokens in the order below
//   [263, 487)  loc tokens LOC_0 .. LOC_223
inline constexpr TokenId kByteBase = 0;
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr TokenId kImgStart = 259;  // "<IMG>"
inline constexpr TokenId kImgEnd = 260;    // "</IMG>"
inline constexpr TokenId kBoxStart = 261;
inline constexpr TokenId kBoxEnd = 262;
inline constexpr TokenId kLocBase = 263;
inline constexpr std::size_t kNumLocTokens = 224;
inline constexpr std::size_t kVocabSize = 487;

enum class TokenClass { Byte, Special, Loc };

TokenClass token_class(TokenId id);
bool is_loc(TokenId id);
TokenId loc_token(std::size_t bin);
std::size_t loc_bin(TokenId id);

/// Human-readable marker, e.g. "<IMG>", "<loc_17>", or the byte char.
std::string describe_token(TokenId id);

/// Versioned plain-text description of the id layout, shipped with
/// checkpoints so stored token streams stay interpretable.
std::string vocab_layout_text();

std::vector<TokenId> tokenize_text(const std::string& bytes);
std::string detokenize_text(const std::vector<TokenId>& ids);

/// Box geometry normalized to the original image frame. Width/height
/// may run past the border (annotations clip); only the per-coordinate
/// [0,1] range is enforced.
struct BBox {
    double x_center = 0.0;
    double y_center = 0.0;
    double width = 0.0;
    double height = 0.0;

    void validate() const;
};

/// min(floor(v*224), 223); errors outside [0,1].
std::size_t quantize_coord(double v);
/// Bin center (i + 0.5) / 224.
double dequantize_coord(std::size_t bin);

/// [BOX_START, loc(x_c), loc(y_c), loc(w), loc(h), BOX_END].
std::vector<TokenId> encode_box(const BBox& box);

struct ParsedBox {
    std::size_t position = 0;  // index of the BOX_START token
    BBox box;
};

struct ParseError {
    std::size_t position = 0;  // index of the offending BOX_START
    std::string reason;
};

struct BoxParseResult {
    std::vector<ParsedBox> boxes;
    std::vector<ParseError> errors;

    bool clean() const { return errors.empty(); }
};

/// Scans for BOX_START spans; well-formed spans are exactly four loc
/// tokens then BOX_END. Malformed spans are reported, never silently
/// skipped; the caller picks recover-and-continue or abort.
BoxParseResult parse_box_spans(const std::vector<TokenId>& tokens);

}  // namespace mmseq::codec

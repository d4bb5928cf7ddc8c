#include "mmseq/codec.hpp"

#include <cmath>
#include <sstream>

#include "mmseq/common.hpp"

namespace mmseq::codec {

TokenClass token_class(TokenId id) {
    MMSEQ_CHECK(id < kVocabSize, "token id ", id, " out of range [0,", kVocabSize, ")");
    if (id < kBos) return TokenClass::Byte;
    if (id < kLocBase) return TokenClass::Special;
    return TokenClass::Loc;
}

bool is_loc(TokenId id) {
    return id >= kLocBase && id < kLocBase + kNumLocTokens;
}

TokenId loc_token(std::size_t bin) {
    MMSEQ_CHECK(bin < kNumLocTokens, "loc bin ", bin, " out of range [0,224)");
    return kLocBase + static_cast<TokenId>(bin);
}

std::size_t loc_bin(TokenId id) {
    MMSEQ_CHECK(is_loc(id), "token ", id, " is not a loc token");
    return id - kLocBase;
}

std::string describe_token(TokenId id) {
    switch (token_class(id)) {
        case TokenClass::Byte: {
            char c = static_cast<char>(id);
            if (id >= 32 && id < 127) return std::string(1, c);
            std::ostringstream os;
            os << "<0x" << std::hex << id << ">";
            return os.str();
        }
        case TokenClass::Special:
            switch (id) {
                case kBos: return "<BOS>";
                case kEos: return "<EOS>";
                case kPad: return "<PAD>";
                case kImgStart: return "<IMG>";
                case kImgEnd: return "</IMG>";
                case kBoxStart: return "<box_start>";
                case kBoxEnd: return "<box_end>";
            }
            return "<?>";
        case TokenClass::Loc: {
            std::ostringstream os;
            os << "<loc_" << loc_bin(id) << ">";
            return os.str();
        }
    }
    return "<?>";
}

std::string vocab_layout_text() {
    std::ostringstream os;
    os << "mmseq vocabulary layout v1\n"
       << "total_size 487\n"
       << "byte_tokens 0..255 (raw byte value = id)\n"
       << "special_tokens:\n"
       << "  256 <BOS>\n"
       << "  257 <EOS>\n"
       << "  258 <PAD>\n"
       << "  259 <IMG>\n"
       << "  260 </IMG>\n"
       << "  261 <box_start>\n"
       << "  262 <box_end>\n"
       << "loc_tokens 263..486 (<loc_i> = 263 + i, i in 0..223)\n"
       << "box span: <box_start> <loc-x_center> <loc-y_center> <loc-width> "
          "<loc-height> <box_end>\n"
       << "coordinate quantizer: bin = min(floor(v*224), 223); "
          "dequantize = (bin + 0.5)/224\n";
    return os.str();
}

std::vector<TokenId> tokenize_text(const std::string& bytes) {
    std::vector<TokenId> ids;
    ids.reserve(bytes.size());
    for (unsigned char c : bytes) ids.push_back(static_cast<TokenId>(c));
    return ids;
}

std::string detokenize_text(const std::vector<TokenId>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        MMSEQ_CHECK(id < 256, "detokenize_text: id ", id, " is not a byte token");
        out.push_back(static_cast<char>(id));
    }
    return out;
}

void BBox::validate() const {
    for (double v : {x_center, y_center, width, height}) {
        MMSEQ_CHECK(v >= 0.0 && v <= 1.0, "bbox coordinate ", v, " outside [0,1]");
    }
}

std::size_t quantize_coord(double v) {
    MMSEQ_CHECK(v >= 0.0 && v <= 1.0, "quantize_coord: value ", v, " outside [0,1]");
    const std::size_t bin = static_cast<std::size_t>(
        std::floor(v * static_cast<double>(kNumLocTokens)));
    return std::min(bin, kNumLocTokens - 1);
}

double dequantize_coord(std::size_t bin) {
    MMSEQ_CHECK(bin < kNumLocTokens, "dequantize_coord: bin ", bin,
                " out of range [0,224)");
    return (static_cast<double>(bin) + 0.5) / static_cast<double>(kNumLocTokens);
}

std::vector<TokenId> encode_box(const BBox& box) {
    box.validate();
    return {kBoxStart,
            loc_token(quantize_coord(box.x_center)),
            loc_token(quantize_coord(box.y_center)),
            loc_token(quantize_coord(box.width)),
            loc_token(quantize_coord(box.height)),
            kBoxEnd};
}

BoxParseResult parse_box_spans(const std::vector<TokenId>& tokens) {
    BoxParseResult result;
    std::size_t i = 0;
    while (i < tokens.size()) {
        if (tokens[i] != kBoxStart) {
            ++i;
            continue;
        }
        const std::size_t start = i;
        ++i;
        std::size_t bins[4] = {};
        std::size_t arity = 0;
        while (i < tokens.size() && is_loc(tokens[i]) && arity < 4) {
            bins[arity++] = loc_bin(tokens[i]);
            ++i;
        }
        if (arity < 4) {
            std::ostringstream os;
            if (i < tokens.size() && tokens[i] != kBoxEnd && !is_loc(tokens[i])) {
                os << "arity " << arity << ", expected 4 (non-loc token inside span)";
            } else if (i >= tokens.size()) {
                os << "arity " << arity << ", expected 4 (stream ended)";
            } else {
                os << "arity " << arity << ", expected 4";
            }
            result.errors.push_back({start, os.str()});
            continue;  // resume scanning at the offending token
        }
        if (i >= tokens.size() || tokens[i] != kBoxEnd) {
            std::string reason = (i < tokens.size() && is_loc(tokens[i]))
                ? "arity exceeds 4, expected box_end"
                : "missing box_end";
            result.errors.push_back({start, reason});
            continue;
        }
        ++i;  // consume box_end
        ParsedBox parsed;
        parsed.position = start;
        parsed.box.x_center = dequantize_coord(bins[0]);
        parsed.box.y_center = dequantize_coord(bins[1]);
        parsed.box.width = dequantize_coord(bins[2]);
        parsed.box.height = dequantize_coord(bins[3]);
        result.boxes.push_back(parsed);
    }
    return result;
}

}  // namespace mmseq::codec

#pragma once

#include <functional>
#include <string>

namespace aescomp {

using WarningSink = std::function<void(const std::string&)>;

/// Routes non-fatal diagnostics (cache corruption, recomputation fallbacks).
/// The default sink writes "warning: <message>" to stderr. Returns the
/// previous sink.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace aescomp

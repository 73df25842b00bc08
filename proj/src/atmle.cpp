// Compiles the umbrella header on its own so a missing include in any module
// shows up here rather than in a downstream project.
#include "atmle/atmle.hpp"

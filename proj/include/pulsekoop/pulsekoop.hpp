#pragma once

#include "pulsekoop/controllers.hpp"
#include "pulsekoop/dmd.hpp"
#include "pulsekoop/errors.hpp"
#include "pulsekoop/io.hpp"
#include "pulsekoop/koopman.hpp"
#include "pulsekoop/models.hpp"
#include "pulsekoop/ode.hpp"
#include "pulsekoop/parallel.hpp"
#include "pulsekoop/pulse_control.hpp"

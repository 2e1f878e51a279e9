DENSITY = 'density'
CONCENTRATION = 'concentration'
CONCENTRATION_A = 'concentration-a'
CONCENTRATION_B = 'concentration-b'
VELOCITY_X = 'velocity-x'
VELOCITY_Y = 'velocity-y'
VORTICITY = 'vorticity'

ALL = (DENSITY, CONCENTRATION, CONCENTRATION_A, CONCENTRATION_B, VELOCITY_X, VELOCITY_Y, VORTICITY,)


def type_id(channel_type: str) -> int:
    return ALL.index(channel_type)

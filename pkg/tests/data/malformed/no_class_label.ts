@problemName X
@data
1,2:a
